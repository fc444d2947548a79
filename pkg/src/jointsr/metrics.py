"""PSNR and mean SSIM on [0, 1] images."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .imaging import DimensionError

WINDOW = 11
SIGMA = 1.5
K1, K2 = 0.01, 0.03


@dataclass(frozen=True)
class MetricPair:
    psnr: float
    mssim: float


def _pair(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if a.shape != b.shape:
        raise DimensionError(f"images differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() not in (3, 4):
        raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got {tuple(a.shape)}")
    a = a.detach().to(torch.float64)
    b = b.detach().to(torch.float64)
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    return a, b


def psnr_batch(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> torch.Tensor:
    """Per-image PSNR in dB; identical images give ``+inf``."""
    a, b = _pair(a, b)
    mse = (a - b).pow(2).flatten(1).mean(dim=1)
    out = torch.full_like(mse, math.inf)
    nz = mse > 0
    out[nz] = 10.0 * torch.log10(peak ** 2 / mse[nz])
    return out


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    if a.dim() != 3:
        raise DimensionError("psnr expects a single (C,H,W) image; use psnr_batch for batches")
    return float(psnr_batch(a, b, peak)[0])


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> torch.Tensor:
    """Per-channel SSIM over all fully-contained 11x11 windows, shape ``(N, C, H-10, W-10)``."""
    a, b = _pair(a, b)
    n, c, h, w = a.shape
    if h < WINDOW or w < WINDOW:
        raise DimensionError(f"images of size {h}x{w} are smaller than the {WINDOW}x{WINDOW} window")
    win = gaussian_window().to(a.dtype).expand(c, 1, WINDOW, WINDOW)

    def filt(x):
        return F.conv2d(x, win, groups=c)

    c1, c2 = (K1 * peak) ** 2, (K2 * peak) ** 2
    mu_a, mu_b = filt(a), filt(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = filt(a * a) - mu_aa
    var_b = filt(b * b) - mu_bb
    cov = filt(a * b) - mu_ab
    return ((2 * mu_ab + c1) * (2 * cov + c2)) / ((mu_aa + mu_bb + c1) * (var_a + var_b + c2))


def mssim_batch(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> torch.Tensor:
    """Per-image MSSIM: the mean SSIM of each channel, averaged over channels."""
    return ssim_map(a, b, peak).mean(dim=(2, 3)).mean(dim=1)


def mssim(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    if a.dim() != 3:
        raise DimensionError("mssim expects a single (C,H,W) image; use mssim_batch for batches")
    return float(mssim_batch(a, b, peak)[0])


def finite_mean(values: torch.Tensor) -> tuple[float, int]:
    """Mean over finite entries and the number of excluded (infinite) entries."""
    finite = torch.isfinite(values)
    n_inf = int((~finite).sum())
    if finite.sum() == 0:
        return math.inf, n_inf
    return float(values[finite].mean()), n_inf
