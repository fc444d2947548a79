"""Frozen multi-scale feature extractor and Gram matrices.

The extractor stands in for an ImageNet-pretrained backbone: a small conv
pyramid whose weights are drawn once from a seeded normal distribution and
shipped with the package (``weights/extractor_v1.bin``). Any weight file in
the same container format can be loaded instead.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import serialization
from .imaging import DimensionError, PathLike

DEFAULT_CHANNELS = (16, 32, 64)
DEFAULT_SEED = 20190101
WEIGHTS_KIND = "feature-extractor"
DEFAULT_WEIGHTS = "extractor_v1.bin"


class FeatureExtractor(nn.Module):
    """Fixed conv pyramid ``[conv3x3-ReLU-conv3x3-ReLU-avgpool2] x N``.

    ``forward`` returns the pooled map of every level, so level ``n``
    (0-based) has spatial size ``input / 2**(n+1)``. Parameters are stored
    as buffers and never receive gradients; gradients do flow to the input.
    """

    def __init__(self, weights: dict[str, torch.Tensor], channels: Sequence[int]):
        super().__init__()
        self.channels = tuple(int(c) for c in channels)
        for i, c in enumerate(self.channels):
            cin = 3 if i == 0 else self.channels[i - 1]
            for j, (ci, co) in enumerate(((cin, c), (c, c))):
                w = weights[f"level{i}.conv{j}.weight"]
                b = weights[f"level{i}.conv{j}.bias"]
                if tuple(w.shape) != (co, ci, 3, 3) or tuple(b.shape) != (co,):
                    raise ValueError(
                        f"level{i}.conv{j}: expected weight {(co, ci, 3, 3)}, got {tuple(w.shape)}"
                    )
                self.register_buffer(f"level{i}_conv{j}_weight", w.detach().clone().float())
                self.register_buffer(f"level{i}_conv{j}_bias", b.detach().clone().float())

    @property
    def levels(self) -> int:
        return len(self.channels)

    @classmethod
    def from_seed(cls, seed: int = DEFAULT_SEED, channels: Sequence[int] = DEFAULT_CHANNELS) -> "FeatureExtractor":
        g = torch.Generator().manual_seed(seed)
        weights = {}
        cin = 3
        for i, c in enumerate(channels):
            for j, ci in enumerate((cin, c)):
                std = (2.0 / (ci * 9)) ** 0.5
                weights[f"level{i}.conv{j}.weight"] = torch.randn(c, ci, 3, 3, generator=g) * std
                weights[f"level{i}.conv{j}.bias"] = torch.randn(c, generator=g) * 0.01
            cin = c
        return cls(weights, channels)

    @classmethod
    def from_file(cls, path: PathLike) -> "FeatureExtractor":
        header, tensors = serialization.load(path, kind=WEIGHTS_KIND)
        return cls(tensors, header["meta"]["channels"])

    @classmethod
    def default(cls) -> "FeatureExtractor":
        """The packaged extractor (falls back to regenerating it from its seed)."""
        ref = resources.files("jointsr").joinpath("weights", DEFAULT_WEIGHTS)
        if ref.is_file():
            with resources.as_file(ref) as p:
                return cls.from_file(p)
        return cls.from_seed()

    def weight_dict(self) -> dict[str, torch.Tensor]:
        out = {}
        for i in range(self.levels):
            for j in range(2):
                out[f"level{i}.conv{j}.weight"] = getattr(self, f"level{i}_conv{j}_weight")
                out[f"level{i}.conv{j}.bias"] = getattr(self, f"level{i}_conv{j}_bias")
        return out

    def save(self, path: PathLike) -> None:
        serialization.save(path, self.weight_dict(), WEIGHTS_KIND, {"channels": list(self.channels)})

    def train(self, mode: bool = True) -> "FeatureExtractor":
        # frozen: always behaves as in eval mode
        return super().train(False)

    def forward(self, img: torch.Tensor) -> list[torch.Tensor]:
        x = img.unsqueeze(0) if img.dim() == 3 else img
        h, w = x.shape[-2:]
        k = 2 ** self.levels
        if h % k or w % k:
            raise DimensionError(f"input {h}x{w} must be divisible by {k} for {self.levels} levels")
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        elif x.shape[1] != 3:
            raise DimensionError(f"expected 1 or 3 input channels, got {x.shape[1]}")
        x = (x - 0.5) * 2.0
        maps = []
        for i in range(self.levels):
            for j in range(2):
                w_ = getattr(self, f"level{i}_conv{j}_weight").to(x.dtype)
                b_ = getattr(self, f"level{i}_conv{j}_bias").to(x.dtype)
                x = F.relu(F.conv2d(x, w_, b_, padding=1))
            x = F.avg_pool2d(x, 2)
            maps.append(x)
        if img.dim() == 3:
            maps = [m[0] for m in maps]
        return maps

    extract = forward


def gram(fmap: torch.Tensor) -> torch.Tensor:
    """Channel autocorrelation ``F^T F / (C*H*W)`` of a ``(C,H,W)`` or ``(N,C,H,W)`` map."""
    c, h, w = fmap.shape[-3:]
    flat = fmap.reshape(*fmap.shape[:-2], h * w)
    return flat @ flat.transpose(-1, -2) / (c * h * w)


def write_default_weights(path: PathLike | None = None) -> Path:
    """Regenerate the packaged weight file from ``DEFAULT_SEED``."""
    if path is None:
        path = Path(__file__).parent / "weights" / DEFAULT_WEIGHTS
    FeatureExtractor.from_seed().save(path)
    return Path(path)
