"""Evaluation harnesses: standard eval, occlusion location and size studies,
sequential baselines, cross-dataset transfer and the training ablations.

Every study draws its masks from an explicit seed, so the same model and
seed always produce the same report.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import Corpus
from .imaging import DimensionError, PathLike, downsample, upsample_bicubic, upsample_nearest
from .metrics import MetricPair, finite_mean, mssim_batch, psnr_batch
from .models import CompoundGenerator, FCModule, SRModule
from .occlusion import (
    BlockSpec,
    apply_occlusion,
    block_mask,
    center_block,
    grid_cell,
    random_block,
)

Pipeline = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class Row:
    condition: str
    psnr: float
    mssim: float
    n: int
    n_inf: int = 0
    psnr_std: float = 0.0
    mssim_std: float = 0.0


@dataclass
class StudyReport:
    title: str
    dataset: str
    rows: list[Row]
    summary: Optional[dict] = None
    meta: dict = field(default_factory=dict)

    def add_summary(self) -> None:
        """Mean and population std of the per-condition means."""
        p = np.array([r.psnr for r in self.rows], dtype=np.float64)
        m = np.array([r.mssim for r in self.rows], dtype=np.float64)
        self.summary = {
            "condition": "Avg. and Std.",
            "psnr_mean": float(p.mean()),
            "psnr_std": float(p.std()),
            "mssim_mean": float(m.mean()),
            "mssim_std": float(m.std()),
        }

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "dataset": self.dataset,
            "rows": [asdict(r) for r in self.rows],
            "summary": self.summary,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "StudyReport":
        return cls(d["title"], d["dataset"], [Row(**r) for r in d["rows"]], d.get("summary"), d.get("meta", {}))

    def table_rows(self) -> list[list[str]]:
        out = [[r.condition, f"{r.psnr:.4f}", f"{r.mssim:.4f}", str(r.n), str(r.n_inf)] for r in self.rows]
        if self.summary:
            s = self.summary
            out.append([
                s["condition"],
                f"{s['psnr_mean']:.4f} ± {s['psnr_std']:.4f}",
                f"{s['mssim_mean']:.4f} ± {s['mssim_std']:.4f}",
                "",
                "",
            ])
        return out

    HEADER = ("condition", "psnr_db", "mssim", "n", "n_inf")

    def to_text(self) -> str:
        rows = [list(self.HEADER)] + self.table_rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(self.HEADER))]
        lines = [f"{self.title} [{self.dataset}]"]
        for k, r in enumerate(rows):
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
            if k == 0:
                lines.append("  ".join("-" * w for w in widths))
        if any(r.n_inf for r in self.rows):
            lines.append("n_inf: images reconstructed exactly (infinite PSNR), excluded from PSNR means")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for r in self.table_rows():
            w.writerow(r)
        return buf.getvalue()

    def write(self, out_dir: PathLike, stem: str, csv_export: bool = False) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json() + "\n")
        (out / f"{stem}.txt").write_text(self.to_text() + "\n")
        if csv_export:
            (out / f"{stem}.csv").write_text(self.to_csv())
        return out / f"{stem}.json"

    def pair(self, condition: Optional[str] = None) -> MetricPair:
        row = self.rows[0] if condition is None else next(r for r in self.rows if r.condition == condition)
        return MetricPair(row.psnr, row.mssim)


# ------------------------------------------------------------------ pipelines


def joint_pipeline(gen: CompoundGenerator) -> Pipeline:
    return lambda lr_occ, mask: gen(lr_occ, mask)[2]


def fc_then_sr(fc: FCModule, sr: SRModule) -> Pipeline:
    return lambda lr_occ, mask: sr(fc(lr_occ, mask)[1])


def sr_then_fc(sr: SRModule, fc: FCModule, scale: int) -> Pipeline:
    """SR on the occluded input, then completion at HR with a nearest-upscaled mask."""

    def run(lr_occ, mask):
        mask_hr = upsample_nearest(mask, scale)
        hr = apply_occlusion(sr(lr_occ), mask_hr)
        return fc(hr, mask_hr)[1]

    return run


def bicubic_pipeline(scale: int) -> Pipeline:
    return lambda lr_occ, mask: upsample_bicubic(lr_occ, scale)


# --------------------------------------------------------------- evaluation


def check_resolution(corpus: Corpus, scale: int, lr_size: Optional[int] = None) -> None:
    if corpus.hr_size % scale:
        raise DimensionError(f"{corpus.name}: HR size {corpus.hr_size} not divisible by scale {scale}")
    if lr_size is not None and corpus.hr_size // scale != lr_size:
        raise DimensionError(
            f"{corpus.name}: LR size {corpus.hr_size // scale} differs from the model's {lr_size}"
        )


def random_masks(n: int, lr_size: int, area_fraction: float, seed: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return torch.stack([block_mask(lr_size, lr_size, random_block(lr_size, lr_size, area_fraction, rng))
                        for _ in range(n)]).unsqueeze(1)


def fixed_masks(n: int, lr_size: int, block: BlockSpec) -> torch.Tensor:
    return block_mask(lr_size, lr_size, block).expand(n, 1, lr_size, lr_size).clone()


@torch.no_grad()
def evaluate(
    pipeline: Pipeline,
    corpus: Corpus,
    scale: int,
    masks: torch.Tensor,
    batch_size: int = 32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-image PSNR and MSSIM of ``pipeline`` output against the HR ground truth.

    Batches are processed in order and concatenated, so results do not
    depend on ``batch_size``.
    """
    check_resolution(corpus, scale)
    ps, ms = [], []
    for start in range(0, len(corpus), batch_size):
        hr = corpus.hr[start:start + batch_size]
        m = masks[start:start + batch_size]
        lr_occ = apply_occlusion(downsample(hr, scale), m)
        out = pipeline(lr_occ, m)
        ps.append(psnr_batch(out, hr))
        ms.append(mssim_batch(out, hr))
    return torch.cat(ps), torch.cat(ms)


def _row(condition: str, p: torch.Tensor, m: torch.Tensor) -> Row:
    mean_p, n_inf = finite_mean(p)
    fin = p[torch.isfinite(p)]
    return Row(condition, mean_p, float(m.mean()), len(p), n_inf,
               float(fin.std(unbiased=False)) if len(fin) else 0.0, float(m.std(unbiased=False)))


def _eval_mode(*mods):
    for mod in mods:
        if mod is not None:
            mod.eval()


def run_standard_eval(
    gen: CompoundGenerator,
    corpus: Corpus,
    scale: int,
    area_fraction: float = 0.25,
    seed: int = 0,
) -> StudyReport:
    """Random block occlusion of ``area_fraction``; recovered output vs the bicubic-upsampled occluded input."""
    _eval_mode(gen)
    lr_size = corpus.hr_size // scale
    masks = random_masks(len(corpus), lr_size, area_fraction, seed)
    rows = [
        _row("recovered", *evaluate(joint_pipeline(gen), corpus, scale, masks)),
        _row("bicubic-occluded", *evaluate(bicubic_pipeline(scale), corpus, scale, masks)),
    ]
    return StudyReport("standard evaluation", corpus.name, rows,
                       meta={"scale": scale, "area_fraction": area_fraction, "seed": seed})


def run_location_study(gen: CompoundGenerator, corpus: Corpus, scale: int, grid: int = 2) -> StudyReport:
    """Occlude one grid cell at a time; one row per cell plus mean and std over cells."""
    if grid not in (2, 3):
        raise ValueError(f"grid must be 2 or 3, got {grid}")
    _eval_mode(gen)
    lr = corpus.hr_size // scale
    rows = []
    for index in range(1, grid * grid + 1):
        masks = fixed_masks(len(corpus), lr, grid_cell(lr, lr, grid, index))
        rows.append(_row(f"Blk-{index}", *evaluate(joint_pipeline(gen), corpus, scale, masks)))
    report = StudyReport(f"occlusion location study ({grid}x{grid} grid)", corpus.name, rows,
                         meta={"scale": scale, "grid": grid})
    report.add_summary()
    return report


def run_size_study(gen: CompoundGenerator, corpus: Corpus, scale: int, sizes: Sequence[int]) -> StudyReport:
    """Centre-anchored square blocks of increasing side length (in LR pixels)."""
    _eval_mode(gen)
    lr = corpus.hr_size // scale
    sizes = sorted(set(int(s) for s in sizes))
    if not sizes:
        raise ValueError("sizes must not be empty")
    rows = []
    for s in sizes:
        masks = fixed_masks(len(corpus), lr, center_block(lr, lr, s))
        rows.append(_row(f"size-{s}", *evaluate(joint_pipeline(gen), corpus, scale, masks)))
    return StudyReport("occlusion size study (centre block)", corpus.name, rows,
                       meta={"scale": scale, "sizes": sizes, "lr_size": lr})


def run_baseline_comparison(
    joint: Optional[CompoundGenerator],
    fc_only: Optional[FCModule],
    sr_only: Optional[SRModule],
    corpus: Corpus,
    scale: int,
    area_fraction: float = 0.25,
    seed: int = 0,
) -> StudyReport:
    """Sequential FC->SR and SR->FC against the joint model on identical masks."""
    missing = [name for name, m in (("joint", joint), ("fc-only", fc_only), ("sr-only", sr_only)) if m is None]
    if missing:
        raise ValueError(f"baseline comparison is missing pipeline(s): {', '.join(missing)}")
    _eval_mode(joint, fc_only, sr_only)
    masks = random_masks(len(corpus), corpus.hr_size // scale, area_fraction, seed)
    rows = [
        _row("FC->SR", *evaluate(fc_then_sr(fc_only, sr_only), corpus, scale, masks)),
        _row("SR->FC", *evaluate(sr_then_fc(sr_only, fc_only, scale), corpus, scale, masks)),
        _row("joint", *evaluate(joint_pipeline(joint), corpus, scale, masks)),
    ]
    return StudyReport("sequential baselines vs joint", corpus.name, rows,
                       meta={"scale": scale, "area_fraction": area_fraction, "seed": seed})


def run_cross_dataset(
    gen: CompoundGenerator,
    foreign: Corpus,
    scale: int,
    lr_size: Optional[int] = None,
    area_fraction: float = 0.25,
    seed: int = 0,
) -> StudyReport:
    """Standard occlusion protocol on a corpus the model was not trained on."""
    check_resolution(foreign, scale, lr_size)
    _eval_mode(gen)
    masks = random_masks(len(foreign), foreign.hr_size // scale, area_fraction, seed)
    row = _row(foreign.name, *evaluate(joint_pipeline(gen), foreign, scale, masks))
    return StudyReport("cross-dataset evaluation", foreign.name, [row],
                       meta={"scale": scale, "area_fraction": area_fraction, "seed": seed})


ABLATIONS = (
    ("(a) train together", {"mode": "single-phase"}, {}),
    ("(b) stage 2 alone", {"mode": "stage2-only"}, {}),
    ("(c) w/o smooth", {}, {"fc_smooth": 0.0, "sr_smooth": 0.0}),
    ("(d) w/o perceptual", {}, {"fc_perceptual": 0.0, "sr_perceptual": 0.0}),
    ("(e) w/o face prior", {}, {"sr_face_prior": 0.0}),
    ("full", {}, {}),
)


def run_ablation_study(
    train: Corpus,
    test: Corpus,
    model_cfg,
    train_cfg,
    weights=None,
    area_fraction: float = 0.25,
    seed: int = 0,
    log: Optional[Callable[[str], None]] = None,
) -> StudyReport:
    """Train and evaluate every ablation condition from configuration alone."""
    from dataclasses import replace

    from .losses import LossWeights
    from .trainer import Trainer

    weights = weights or LossWeights()
    masks = random_masks(len(test), test.hr_size // model_cfg.scale, area_fraction, seed)
    rows = []
    for name, cfg_over, w_over in ABLATIONS:
        tcfg = replace(train_cfg, **cfg_over)
        trainer = Trainer(model_cfg, tcfg, replace(weights, **w_over))
        trainer.run(train)
        gen = trainer.generator.eval()
        rows.append(_row(name, *evaluate(joint_pipeline(gen), test, model_cfg.scale, masks)))
        if log:
            log(f"{name}: psnr={rows[-1].psnr:.3f} mssim={rows[-1].mssim:.4f}")
    full = rows[-1]
    ordering = {
        r.condition: {"psnr_le_full": r.psnr <= full.psnr, "mssim_le_full": r.mssim <= full.mssim}
        for r in rows[:-1]
    }
    return StudyReport("training-strategy and loss ablations", test.name, rows,
                       meta={"scale": model_cfg.scale, "ordering": ordering})
