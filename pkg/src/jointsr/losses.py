"""Loss terms for completion and super-resolution, and their weighted sums.

Reduction conventions: pixel, perceptual, style and face-prior terms average
over elements (and over the batch); the smooth term is a raw per-image sum of
absolute neighbour differences, averaged over the batch only.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Optional, Sequence

import torch

from .features import FeatureExtractor, gram
from .imaging import DimensionError

EPS = 1e-7

FC_TERMS = ("style", "perceptual", "pixel", "smooth")
SR_TERMS = ("adv", "face_prior", "perceptual", "pixel", "smooth")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def pixel_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute error."""
    _same_shape(a, b)
    return (a - b).abs().mean()


def feature_distance(
    pred_maps: Sequence[torch.Tensor], gt_maps: Sequence[torch.Tensor]
) -> torch.Tensor:
    return sum((p - g).abs().mean() for p, g in zip(pred_maps, gt_maps))


def gram_distance(
    pred_maps: Sequence[torch.Tensor], gt_maps: Sequence[torch.Tensor]
) -> torch.Tensor:
    return sum((gram(p) - gram(g)).abs().mean() for p, g in zip(pred_maps, gt_maps))


def perceptual_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    extractor: FeatureExtractor,
    gt_maps: Optional[Sequence[torch.Tensor]] = None,
) -> torch.Tensor:
    """Sum over pyramid levels of the mean L1 distance between feature maps."""
    _same_shape(pred, gt)
    if gt_maps is None:
        gt_maps = extractor(gt)
    return feature_distance(extractor(pred), gt_maps)


def perceptual_loss_lr(
    raw: torch.Tensor,
    completed: torch.Tensor,
    gt: torch.Tensor,
    extractor: FeatureExtractor,
) -> torch.Tensor:
    """Completion-stage perceptual term: raw output and composited output, each against gt."""
    _same_shape(raw, completed)
    gt_maps = extractor(gt)
    return perceptual_loss(raw, gt, extractor, gt_maps) + perceptual_loss(completed, gt, extractor, gt_maps)


def style_loss(
    raw: torch.Tensor,
    completed: torch.Tensor,
    gt: torch.Tensor,
    extractor: FeatureExtractor,
) -> torch.Tensor:
    """Gram-matrix L1 distance to gt, for the raw and the composited output, summed over levels."""
    _same_shape(raw, gt)
    _same_shape(completed, gt)
    gt_maps = extractor(gt)
    return gram_distance(extractor(raw), gt_maps) + gram_distance(extractor(completed), gt_maps)


def smooth_loss(img: torch.Tensor) -> torch.Tensor:
    """Anisotropic total variation: sum of |horizontal| + |vertical| first differences.

    Summed over channels and pixels of each image, then averaged over the
    batch. A 1x1 image has no differences and scores 0.
    """
    x = img.unsqueeze(0) if img.dim() == 3 else img
    dh = (x[..., :, 1:] - x[..., :, :-1]).abs().flatten(1).sum(dim=1)
    dv = (x[..., 1:, :] - x[..., :-1, :]).abs().flatten(1).sum(dim=1)
    return (dh + dv).mean()


def adversarial_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Discriminator BCE: ``-mean log D(x) - mean log(1 - D(G(z)))``."""
    real = real_scores.clamp(eps, 1.0 - eps)
    fake = fake_scores.clamp(eps, 1.0 - eps)
    return -torch.log(real).mean() - torch.log1p(-fake).mean()


def adversarial_g_loss(fake_scores: torch.Tensor, mode: str = "nonsaturating", eps: float = EPS) -> torch.Tensor:
    """Generator adversarial term.

    ``nonsaturating`` minimizes ``-mean log D(G(z))``; ``minimax`` minimizes
    ``mean log(1 - D(G(z)))`` as in the original two-player objective (this
    one is non-positive).
    """
    fake = fake_scores.clamp(eps, 1.0 - eps)
    if mode == "nonsaturating":
        return -torch.log(fake).mean()
    if mode == "minimax":
        return torch.log1p(-fake).mean()
    raise ValueError(f"unknown adversarial mode {mode!r}; use 'nonsaturating' or 'minimax'")


def face_prior_loss(
    pred_lm: torch.Tensor,
    gt_lm: torch.Tensor,
    pred_parse: torch.Tensor,
    gt_parse: torch.Tensor,
    alpha: float = 1.0,
    beta: float = 1.0,
    valid: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """``alpha * MSE(landmark heatmaps) + beta * MSE(parsing maps)``.

    ``valid`` is an optional per-sample boolean vector for batched input;
    samples without annotations are excluded, and a batch with none scores 0.
    """
    _same_shape(pred_lm, gt_lm, "landmark heatmaps")
    _same_shape(pred_parse, gt_parse, "parsing maps")
    if valid is None:
        return alpha * (pred_lm - gt_lm).pow(2).mean() + beta * (pred_parse - gt_parse).pow(2).mean()
    if pred_lm.dim() != 4 or valid.shape != (pred_lm.shape[0],):
        raise DimensionError("valid must be a per-sample vector matching a 4-d batch")
    w = valid.to(pred_lm.dtype)
    n = w.sum()
    if n == 0:
        return (pred_lm.sum() + pred_parse.sum()) * 0.0
    lm = (pred_lm - gt_lm).pow(2).flatten(1).mean(dim=1)
    ps = (pred_parse - gt_parse).pow(2).flatten(1).mean(dim=1)
    return (alpha * (lm * w).sum() + beta * (ps * w).sum()) / n


@dataclass
class LossWeights:
    """Coefficients of the completion loss, the super-resolution loss and the face-prior term."""

    fc_style: float = 10.0
    fc_perceptual: float = 0.1
    fc_pixel: float = 0.1
    fc_smooth: float = 1.0
    sr_adv: float = 1e-3
    sr_face_prior: float = 1.0
    sr_perceptual: float = 0.01
    sr_pixel: float = 1.0
    sr_smooth: float = 0.01
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {f.name} must be a finite non-negative number, got {v!r}")

    def fc(self) -> dict[str, float]:
        return {t: getattr(self, f"fc_{t}") for t in FC_TERMS}

    def sr(self) -> dict[str, float]:
        return {t: getattr(self, f"sr_{t}") for t in SR_TERMS}

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def _weighted(terms: Mapping[str, object], weights: Mapping[str, float]):
    missing = set(weights) - set(terms)
    if missing:
        raise KeyError(f"missing loss terms: {sorted(missing)}")
    total = 0.0
    for name, w in weights.items():
        total = total + w * terms[name]
    return total


def l_fc(terms: Mapping[str, object], weights: LossWeights = LossWeights()):
    """Completion-stage objective over ``style``, ``perceptual``, ``pixel``, ``smooth``."""
    return _weighted(terms, weights.fc())


def l_sr(terms: Mapping[str, object], weights: LossWeights = LossWeights()):
    """Super-resolution objective over ``adv``, ``face_prior``, ``perceptual``, ``pixel``, ``smooth``."""
    return _weighted(terms, weights.sr())


def l_total(fc_value, sr_value):
    return fc_value + sr_value


@dataclass
class LossReport:
    step: int
    stage: str
    terms: dict[str, float] = field(default_factory=dict)
    composites: dict[str, float] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        step: int,
        stage: str,
        weights: LossWeights,
        fc_terms: Optional[Mapping[str, float]] = None,
        sr_terms: Optional[Mapping[str, float]] = None,
        extra: Optional[Mapping[str, float]] = None,
    ) -> "LossReport":
        """Assemble a report; composites are recomputed here from the logged term values."""
        terms: dict[str, float] = {}
        composites: dict[str, float] = {}
        if fc_terms is not None:
            fc = {k: float(v) for k, v in fc_terms.items()}
            terms.update({f"fc_{k}": v for k, v in fc.items()})
            composites["l_fc"] = l_fc(fc, weights)
        if sr_terms is not None:
            sr = {k: float(v) for k, v in sr_terms.items()}
            terms.update({f"sr_{k}": v for k, v in sr.items()})
            composites["l_sr"] = l_sr(sr, weights)
        if fc_terms is not None and sr_terms is not None:
            composites["l_total"] = l_total(composites["l_fc"], composites["l_sr"])
        if extra:
            terms.update({k: float(v) for k, v in extra.items()})
        for k, v in {**terms, **composites}.items():
            if not math.isfinite(v):
                raise FloatingPointError(f"non-finite loss {k}={v} at step {step} ({stage})")
        return cls(step, stage, terms, composites)

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "stage": self.stage, **self.terms, **self.composites})
