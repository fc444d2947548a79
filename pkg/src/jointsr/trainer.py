"""Two-stage training schedule, face-prior pre-training and checkpoints.

Phases run in order:

1. ``prior``   face-prior net on (image, heatmaps, parsing) triples
2. ``stage1``  completion module alone under the completion loss
3. ``stage2``  alternating discriminator / generator updates; the first
   ``warmup_steps`` update only the SR module (completion frozen) under
   the SR loss, the rest update both modules under the total loss

The face-prior net is frozen from stage 2 on. A single numpy generator
drives batch indices, crops and masks; its state is checkpointed, so a
resumed run replays an uninterrupted one.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import serialization
from .data import Corpus
from .features import FeatureExtractor
from .imaging import PathLike, downsample
from .losses import (
    LossReport,
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    face_prior_loss,
    feature_distance,
    gram_distance,
    l_fc,
    l_sr,
    pixel_loss,
    smooth_loss,
)
from .models import (
    CompoundGenerator,
    FacePriorNet,
    FCModule,
    ModelConfig,
    PatchDiscriminator,
    SRModule,
    build_discriminator,
    build_face_prior,
    build_fc,
    build_sr,
)
from .occlusion import apply_occlusion, random_block_masks

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"
MODES = ("two-stage", "single-phase", "stage2-only")
PHASES = ("prior", "stage1", "stage2", "sr_only", "done")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    prior_steps: int = 500
    stage1_steps: int = 1000
    stage2_steps: int = 1500
    warmup_steps: int = -1  # -1: 20% of stage2_steps
    sr_only_steps: int = 0
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    area_fraction: float = 0.25
    adv_mode: str = "nonsaturating"
    mode: str = "two-stage"
    augment_crop: bool = True
    augment_flip: bool = False
    log_every: int = 100

    def __post_init__(self) -> None:
        for name in ("prior_steps", "stage1_steps", "stage2_steps", "sr_only_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.warmup_steps < -1:
            raise ValueError("warmup_steps must be >= 0, or -1 for the default")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.area_fraction <= 1.0:
            raise ValueError("area_fraction must lie in [0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.adv_mode not in ("nonsaturating", "minimax"):
            raise ValueError(f"adv_mode must be 'nonsaturating' or 'minimax', got {self.adv_mode!r}")

    @property
    def stage2_total(self) -> int:
        """Stage-2 length; the single-phase ablation spends the stage-1 budget here too."""
        if self.mode == "single-phase":
            return self.stage1_steps + self.stage2_steps
        return self.stage2_steps

    @property
    def warmup(self) -> int:
        if self.mode == "single-phase":
            return 0
        w = round(0.2 * self.stage2_steps) if self.warmup_steps < 0 else self.warmup_steps
        return min(w, self.stage2_total)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _freeze(module: nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def _adam(module: nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


class Trainer:
    """Owns every network, optimizer, counter and the data RNG of one run."""

    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        weights: Optional[LossWeights] = None,
        extractor: Optional[FeatureExtractor] = None,
    ):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.weights = weights or LossWeights()
        self.extractor = extractor or FeatureExtractor.default()
        seed = train_cfg.seed
        self.fc = build_fc(model_cfg, seed * 10 + 1)
        self.sr = build_sr(model_cfg, seed * 10 + 2)
        self.disc = build_discriminator(model_cfg, seed * 10 + 3)
        self.prior = build_face_prior(model_cfg, seed * 10 + 4)
        self.fc_stage1: Optional[FCModule] = None
        self.sr_only: Optional[SRModule] = None
        self.opt_fc = _adam(self.fc, train_cfg)
        self.opt_sr = _adam(self.sr, train_cfg)
        self.opt_d = _adam(self.disc, train_cfg)
        self.opt_prior = _adam(self.prior, train_cfg)
        self.opt_sr_only: Optional[torch.optim.Adam] = None
        self.rng = np.random.default_rng([train_cfg.seed, 7919])
        self.phase = "prior"
        self.steps = {"prior": 0, "stage1": 0, "stage2": 0, "sr_only": 0, "d": 0, "g": 0}
        self.hashes: dict[str, str] = {}

    # ------------------------------------------------------------------ data

    @property
    def scale(self) -> int:
        return self.model_cfg.scale

    def check_corpus(self, corpus: Corpus) -> None:
        if len(corpus) == 0:
            raise TrainingError("the training corpus is empty")
        size = corpus.hr_size
        if size % self.scale or (size // self.scale) % 2 ** self.extractor.levels:
            raise TrainingError(
                f"corpus HR size {size} is incompatible with scale x{self.scale} "
                f"(LR size must be divisible by {2 ** self.extractor.levels})"
            )
        if corpus.landmarks.shape[1] != self.model_cfg.n_landmarks or corpus.parsing.shape[1] != self.model_cfg.n_parsing:
            raise TrainingError(
                f"corpus priors have {corpus.landmarks.shape[1]} landmarks / {corpus.parsing.shape[1]} "
                f"parsing classes; the model expects {self.model_cfg.n_landmarks} / {self.model_cfg.n_parsing}"
            )

    def sample_batch(self, corpus: Corpus) -> dict[str, torch.Tensor]:
        cfg = self.cfg
        rng = self.rng
        idx = torch.from_numpy(rng.integers(0, len(corpus), cfg.batch_size))
        hr, lm, ps = corpus.hr[idx], corpus.landmarks[idx], corpus.parsing[idx]
        if cfg.augment_crop:
            size = corpus.hr_size
            pad = max(1, size // 16)
            stacked = F.pad(torch.cat([hr, lm, ps], dim=1), (pad,) * 4, mode="reflect")
            offs = rng.integers(0, 2 * pad + 1, (cfg.batch_size, 2))
            stacked = torch.stack(
                [stacked[i, :, y:y + size, x:x + size] for i, (y, x) in enumerate(offs.tolist())]
            )
            c, nl = hr.shape[1], lm.shape[1]
            hr, lm, ps = stacked[:, :c], stacked[:, c:c + nl], stacked[:, c + nl:]
        if cfg.augment_flip:
            flip = torch.from_numpy(rng.random(cfg.batch_size) < 0.5)
            hr = torch.where(flip[:, None, None, None], hr.flip(-1), hr)
            lm = torch.where(flip[:, None, None, None], lm.flip(-1), lm)
            ps = torch.where(flip[:, None, None, None], ps.flip(-1), ps)
        lr = downsample(hr, self.scale)
        lh, lw = lr.shape[-2:]
        if cfg.area_fraction > 0:
            mask = random_block_masks(cfg.batch_size, lh, lw, cfg.area_fraction, rng)
        else:
            mask = torch.ones(cfg.batch_size, 1, lh, lw)
        return {
            "hr": hr,
            "lr": lr,
            "lr_occ": apply_occlusion(lr, mask),
            "mask": mask,
            "landmarks": lm,
            "parsing": ps,
            "valid": corpus.has_prior[idx],
        }

    # ----------------------------------------------------------------- steps

    def fc_terms(self, raw, completed, lr_gt) -> dict[str, torch.Tensor]:
        phi = self.extractor
        gt_maps = phi(lr_gt)
        raw_maps, comp_maps = phi(raw), phi(completed)
        return {
            "style": gram_distance(raw_maps, gt_maps) + gram_distance(comp_maps, gt_maps),
            "perceptual": feature_distance(raw_maps, gt_maps) + feature_distance(comp_maps, gt_maps),
            "pixel": pixel_loss(completed, lr_gt),
            "smooth": smooth_loss(completed),
        }

    def sr_terms(self, hr, batch, scores) -> dict[str, torch.Tensor]:
        w = self.weights
        if w.sr_face_prior > 0:
            lm, ps = self.prior(hr)
            fp = face_prior_loss(lm, batch["landmarks"], ps, batch["parsing"], w.alpha, w.beta,
                                 valid=batch["valid"])
        else:
            fp = hr.new_zeros(())
        phi = self.extractor
        return {
            "adv": adversarial_g_loss(scores, self.cfg.adv_mode) if scores is not None else hr.new_zeros(()),
            "face_prior": fp,
            "perceptual": feature_distance(phi(hr), phi(batch["hr"])),
            "pixel": pixel_loss(hr, batch["hr"]),
            "smooth": smooth_loss(hr),
        }

    def prior_step(self, batch) -> LossReport:
        self.prior.train()
        lm, ps = self.prior(batch["hr"])
        w = self.weights
        loss = face_prior_loss(lm, batch["landmarks"], ps, batch["parsing"], w.alpha, w.beta,
                               valid=batch["valid"])
        self.opt_prior.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_prior.step()
        self.steps["prior"] += 1
        return LossReport.build(self.steps["prior"], "prior", self.weights, extra={"face_prior": loss.item()})

    def stage1_step(self, batch) -> LossReport:
        self.fc.train()
        raw, completed = self.fc(batch["lr_occ"], batch["mask"])
        terms = self.fc_terms(raw, completed, batch["lr"])
        loss = l_fc(terms, self.weights)
        self.opt_fc.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_fc.step()
        self.steps["stage1"] += 1
        return LossReport.build(self.steps["stage1"], "stage1", self.weights,
                                fc_terms={k: v.item() for k, v in terms.items()})

    def stage2_step(self, batch) -> LossReport:
        joint = self.steps["stage2"] >= self.cfg.warmup
        self.sr.train()
        self.disc.train()
        if joint:
            self.fc.train()
            raw, completed = self.fc(batch["lr_occ"], batch["mask"])
        else:
            with torch.no_grad():
                self.fc.eval()
                raw, completed = self.fc(batch["lr_occ"], batch["mask"])
        hr = self.sr(completed)

        use_adv = self.weights.sr_adv > 0
        d_loss = 0.0
        if use_adv:
            d_real = self.disc(batch["hr"])
            d_fake = self.disc(hr.detach())
            loss_d = adversarial_d_loss(d_real, d_fake)
            self.opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            self.opt_d.step()
            d_loss = loss_d.item()
        self.steps["d"] += 1

        scores = None
        if use_adv:
            for p in self.disc.parameters():
                p.requires_grad_(False)
            scores = self.disc(hr)
        sr_terms = self.sr_terms(hr, batch, scores)
        loss = l_sr(sr_terms, self.weights)
        fc_terms = None
        if joint:
            fc_terms = self.fc_terms(raw, completed, batch["lr"])
            loss = loss + l_fc(fc_terms, self.weights)
        self.opt_sr.zero_grad(set_to_none=True)
        self.opt_fc.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_sr.step()
        if joint:
            self.opt_fc.step()
        for p in self.disc.parameters():
            p.requires_grad_(True)
        self.steps["g"] += 1
        self.steps["stage2"] += 1
        return LossReport.build(
            self.steps["stage2"],
            "stage2-joint" if joint else "stage2-warmup",
            self.weights,
            fc_terms={k: v.item() for k, v in fc_terms.items()} if fc_terms else None,
            sr_terms={k: v.item() for k, v in sr_terms.items()},
            extra={"d_loss": d_loss},
        )

    def sr_only_step(self, batch) -> LossReport:
        """Super-resolution of clean LR images, no completion; used by the sequential baselines."""
        if self.sr_only is None:
            self.sr_only = build_sr(self.model_cfg, self.cfg.seed * 10 + 5)
            self.opt_sr_only = _adam(self.sr_only, self.cfg)
        self.sr_only.train()
        hr = self.sr_only(batch["lr"])
        phi = self.extractor
        terms = {
            "adv": 0.0,
            "face_prior": 0.0,
            "perceptual": feature_distance(phi(hr), phi(batch["hr"])),
            "pixel": pixel_loss(hr, batch["hr"]),
            "smooth": smooth_loss(hr),
        }
        loss = l_sr(terms, self.weights)
        self.opt_sr_only.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_sr_only.step()
        self.steps["sr_only"] += 1
        return LossReport.build(self.steps["sr_only"], "sr_only", self.weights,
                                sr_terms={k: float(v.detach()) if torch.is_tensor(v) else v
                                          for k, v in terms.items()})

    # -------------------------------------------------------------- schedule

    def _phase_length(self, phase: str) -> int:
        cfg = self.cfg
        return {
            "prior": cfg.prior_steps,
            "stage1": cfg.stage1_steps if cfg.mode == "two-stage" else 0,
            "stage2": cfg.stage2_total,
            "sr_only": cfg.sr_only_steps,
        }[phase]

    def _check_frozen(self, name: str, module: nn.Module) -> None:
        h = param_hash(module)
        if name in self.hashes and self.hashes[name] != h:
            raise TrainingError(f"frozen module '{name}' changed between phase boundaries")
        self.hashes[name] = h

    def _enter(self, phase: str) -> None:
        log.info("entering phase %s", phase)
        self.phase = phase
        if phase == "stage2":
            if self.cfg.mode == "two-stage" and self.fc_stage1 is None:
                self.fc_stage1 = copy.deepcopy(self.fc).eval()

    def run(
        self,
        corpus: Corpus,
        on_report: Optional[Callable[[LossReport], None]] = None,
        max_steps: Optional[int] = None,
        stop_after: Optional[str] = None,
    ) -> "Trainer":
        """Advance the schedule from the current state.

        ``max_steps`` bounds the number of optimizer steps taken in this call
        (used to stop mid-run for checkpointing); ``stop_after`` halts once
        the named phase is complete.
        """
        self.check_corpus(corpus)
        if self.cfg.prior_steps > 0 and not bool(corpus.has_prior.any()):
            raise TrainingError("face-prior training needs annotated samples; none found in corpus")
        taken = 0
        step_fns = {
            "prior": self.prior_step,
            "stage1": self.stage1_step,
            "stage2": self.stage2_step,
            "sr_only": self.sr_only_step,
        }
        order = PHASES[:-1]
        while self.phase != "done":
            phase = self.phase
            n = self._phase_length(phase)
            if phase == "stage2":
                _freeze(self.prior)
                self._check_frozen("prior", self.prior)
            while self.steps[phase] < n:
                if max_steps is not None and taken >= max_steps:
                    return self
                if phase == "stage2" and self.cfg.warmup > 0:
                    if self.steps["stage2"] == 0:
                        self.hashes["fc"] = param_hash(self.fc)
                    elif self.steps["stage2"] == self.cfg.warmup:
                        self._check_frozen("fc", self.fc)
                report = step_fns[phase](self.sample_batch(corpus))
                taken += 1
                if on_report is not None:
                    on_report(report)
                if self.cfg.log_every and report.step % self.cfg.log_every == 0:
                    log.info("%s step %d %s", report.stage, report.step,
                             json.dumps({**report.composites}, sort_keys=True))
            if phase == "stage2":
                self._check_frozen("prior", self.prior)
                if self.cfg.warmup >= n and "fc" in self.hashes:
                    self._check_frozen("fc", self.fc)
            nxt = order[order.index(phase) + 1] if phase != order[-1] else "done"
            if stop_after == phase:
                self._enter(nxt)
                return self
            self._enter(nxt)
        return self

    @property
    def generator(self) -> CompoundGenerator:
        return CompoundGenerator(self.fc, self.sr)

    # ------------------------------------------------------------ checkpoints

    def _modules(self) -> dict[str, nn.Module]:
        mods = {"fc": self.fc, "sr": self.sr, "disc": self.disc, "prior": self.prior}
        if self.fc_stage1 is not None:
            mods["fc_stage1"] = self.fc_stage1
        if self.sr_only is not None:
            mods["sr_only"] = self.sr_only
        return mods

    def _optimizers(self) -> dict[str, torch.optim.Optimizer]:
        opts = {"fc": self.opt_fc, "sr": self.opt_sr, "disc": self.opt_d, "prior": self.opt_prior}
        if self.opt_sr_only is not None:
            opts["sr_only"] = self.opt_sr_only
        return opts

    def state_tensors(self) -> tuple[dict[str, torch.Tensor], dict]:
        tensors: dict[str, torch.Tensor] = {}
        for name, mod in self._modules().items():
            for k, v in mod.state_dict().items():
                tensors[f"model.{name}.{k}"] = v
        opt_meta = {}
        for name, opt in self._optimizers().items():
            sd = opt.state_dict()
            opt_meta[name] = sd["param_groups"]
            for pid in sorted(sd["state"]):
                for k in sorted(sd["state"][pid]):
                    v = sd["state"][pid][k]
                    tensors[f"optim.{name}.{pid}.{k}"] = v if torch.is_tensor(v) else torch.tensor(float(v))
        meta = {
            "architecture": self.model_cfg.to_dict(),
            "train": self.cfg.to_dict(),
            "weights": self.weights.to_dict(),
            "phase": self.phase,
            "steps": dict(self.steps),
            "rng": self.rng.bit_generator.state,
            "hashes": dict(self.hashes),
            "optimizers": opt_meta,
            "extractor_channels": list(self.extractor.channels),
        }
        return tensors, meta

    def save_checkpoint(self, path: PathLike) -> None:
        tensors, meta = self.state_tensors()
        serialization.save(path, tensors, CHECKPOINT_KIND, meta)

    @classmethod
    def from_checkpoint(cls, path: PathLike, extractor: Optional[FeatureExtractor] = None) -> "Trainer":
        header, tensors = serialization.load(path, kind=CHECKPOINT_KIND)
        return cls._from_state(header["meta"], tensors, extractor, str(path))

    @classmethod
    def _from_state(cls, meta: dict, tensors: dict, extractor, source: str) -> "Trainer":
        try:
            t = cls(ModelConfig.from_dict(meta["architecture"]), TrainConfig.from_dict(meta["train"]),
                    LossWeights(**meta["weights"]), extractor)
            groups: dict[str, dict] = {}
            for key, v in tensors.items():
                kind, name, rest = key.split(".", 2)
                groups.setdefault(f"{kind}.{name}", {})[rest] = v
            if "model.fc_stage1" in groups:
                t.fc_stage1 = build_fc(t.model_cfg)
            if "model.sr_only" in groups or "sr_only" in meta["optimizers"]:
                t.sr_only = build_sr(t.model_cfg)
                t.opt_sr_only = _adam(t.sr_only, t.cfg)
            for name, mod in t._modules().items():
                mod.load_state_dict(groups.get(f"model.{name}", {}), strict=True)
            if t.fc_stage1 is not None:
                t.fc_stage1.eval()
            for name, opt in t._optimizers().items():
                state: dict[int, dict] = {}
                for rest, v in groups.get(f"optim.{name}", {}).items():
                    pid, k = rest.split(".", 1)
                    state.setdefault(int(pid), {})[k] = v
                opt.load_state_dict({"state": state, "param_groups": meta["optimizers"][name]})
            t.phase = meta["phase"]
            t.steps = {k: int(v) for k, v in meta["steps"].items()}
            t.rng.bit_generator.state = meta["rng"]
            t.hashes = dict(meta.get("hashes", {}))
        except (KeyError, ValueError, RuntimeError, TypeError) as exc:
            raise serialization.ContainerError(f"{source}: inconsistent checkpoint ({exc})") from exc
        if t.phase not in PHASES:
            raise serialization.ContainerError(f"{source}: unknown phase {t.phase!r}")
        if t.phase in ("stage2", "sr_only", "done"):
            _freeze(t.prior)
        return t

    def restore(self, path: PathLike) -> None:
        """Replace this trainer's state with a checkpoint; on error nothing changes."""
        other = Trainer.from_checkpoint(path, self.extractor)
        self.__dict__.update(other.__dict__)


def load_generator(path: PathLike) -> tuple[CompoundGenerator, ModelConfig]:
    """Inference-only: rebuild the compound generator from a checkpoint's own descriptor."""
    header, tensors = serialization.load(path, kind=CHECKPOINT_KIND)
    cfg = ModelConfig.from_dict(header["meta"]["architecture"])
    fc, sr = build_fc(cfg), build_sr(cfg)
    try:
        fc.load_state_dict({k[len("model.fc."):]: v for k, v in tensors.items() if k.startswith("model.fc.")})
        sr.load_state_dict({k[len("model.sr."):]: v for k, v in tensors.items() if k.startswith("model.sr.")})
    except RuntimeError as exc:
        raise serialization.ContainerError(f"{path}: generator weights do not match descriptor ({exc})") from exc
    gen = CompoundGenerator(fc, sr).eval()
    for p in gen.parameters():
        p.requires_grad_(False)
    return gen, cfg


# ---------------------------------------------------------- functional API


def train_face_prior(corpus: Corpus, config: TrainConfig, model_cfg: Optional[ModelConfig] = None,
                     weights: Optional[LossWeights] = None, on_report=None) -> FacePriorNet:
    if len(corpus) == 0 or not bool(corpus.has_prior.any()):
        raise TrainingError("face-prior training needs a non-empty annotated dataset")
    t = Trainer(model_cfg or ModelConfig(), config, weights)
    t.run(corpus, on_report, stop_after="prior")
    return t.prior


def train_stage1(corpus: Corpus, config: TrainConfig, model_cfg: Optional[ModelConfig] = None,
                 weights: Optional[LossWeights] = None, on_report=None) -> FCModule:
    t = Trainer(model_cfg or ModelConfig(), config, weights)
    t.check_corpus(corpus)
    t.phase = "stage1"
    t.run(corpus, on_report, stop_after="stage1")
    return t.fc


def train_stage2(
    corpus: Corpus,
    config: TrainConfig,
    fc: Optional[FCModule],
    face_prior: FacePriorNet,
    model_cfg: Optional[ModelConfig] = None,
    weights: Optional[LossWeights] = None,
    on_report=None,
) -> tuple[CompoundGenerator, PatchDiscriminator]:
    if fc is None and config.mode == "two-stage":
        raise TrainingError("stage 2 needs stage-1 completion weights (or an ablation mode)")
    t = Trainer(model_cfg or ModelConfig(), config, weights)
    if fc is not None:
        t.fc.load_state_dict(fc.state_dict())
        t.fc_stage1 = copy.deepcopy(t.fc).eval()
    t.prior.load_state_dict(face_prior.state_dict())
    t.phase = "stage2"
    t.run(corpus, on_report, stop_after="stage2")
    return t.generator, t.disc
