"""Occlusion masks and mask compositing.

A mask is a float tensor of shape ``(H, W)`` (or ``(N, 1, H, W)`` for a
batch) holding 0 at occluded pixels and 1 at visible ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .imaging import DimensionError, ImageIOError, PathLike, load_image


@dataclass(frozen=True)
class BlockSpec:
    top: int
    left: int
    height: int
    width: int

    def check_bounds(self, h: int, w: int) -> None:
        if self.height < 0 or self.width < 0:
            raise ValueError(f"block size must be non-negative, got {self.height}x{self.width}")
        if self.top < 0 or self.left < 0 or self.top + self.height > h or self.left + self.width > w:
            raise ValueError(f"block {self} does not fit inside a {h}x{w} image")


def block_mask(h: int, w: int, block: BlockSpec) -> torch.Tensor:
    block.check_bounds(h, w)
    m = torch.ones(h, w)
    m[block.top:block.top + block.height, block.left:block.left + block.width] = 0.0
    return m


def block_side(h: int, w: int, area_fraction: float) -> int:
    """Side of the square block covering ``area_fraction`` of an h x w image."""
    if not 0.0 < area_fraction <= 1.0:
        raise ValueError(f"area_fraction must lie in (0, 1], got {area_fraction}")
    # epsilon guards exact squares such as 0.25 * 32 * 32 against sqrt round-off
    side = max(1, int(math.floor(math.sqrt(area_fraction * h * w) + 1e-9)))
    if side > min(h, w):
        raise ValueError(
            f"a {side}x{side} block for area fraction {area_fraction} does not fit in {h}x{w}"
        )
    return side


def random_block(h: int, w: int, area_fraction: float, rng: np.random.Generator) -> BlockSpec:
    side = block_side(h, w, area_fraction)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    return BlockSpec(top, left, side, side)


def random_block_mask(h: int, w: int, area_fraction: float, seed: int) -> torch.Tensor:
    """One square zero block of the requested area, placed uniformly at random.

    The placement depends only on ``seed``.
    """
    rng = np.random.default_rng(seed)
    return block_mask(h, w, random_block(h, w, area_fraction, rng))


def random_block_masks(
    n: int, h: int, w: int, area_fraction: float, rng: np.random.Generator
) -> torch.Tensor:
    """A batch ``(n, 1, h, w)`` of independent random block masks drawn from ``rng``."""
    masks = torch.ones(n, 1, h, w)
    for i in range(n):
        b = random_block(h, w, area_fraction, rng)
        masks[i, 0, b.top:b.top + b.height, b.left:b.left + b.width] = 0.0
    return masks


def grid_cell(h: int, w: int, grid: int, index: int) -> BlockSpec:
    """Row-major cell ``index`` (1-based) of a ``grid x grid`` partition."""
    if grid < 1:
        raise ValueError(f"grid must be positive, got {grid}")
    if not 1 <= index <= grid * grid:
        raise ValueError(f"block index must be in [1, {grid * grid}], got {index}")
    row, col = divmod(index - 1, grid)
    top, bottom = row * h // grid, (row + 1) * h // grid
    left, right = col * w // grid, (col + 1) * w // grid
    return BlockSpec(top, left, bottom - top, right - left)


def grid_block_mask(h: int, w: int, grid: int, index: int) -> torch.Tensor:
    return block_mask(h, w, grid_cell(h, w, grid, index))


def center_block(h: int, w: int, size: int) -> BlockSpec:
    if size < 0 or size > min(h, w):
        raise ValueError(f"block side {size} does not fit inside a {h}x{w} image")
    return BlockSpec((h - size) // 2, (w - size) // 2, size, size)


def center_block_mask(h: int, w: int, size: int) -> torch.Tensor:
    """Square block of side ``size`` anchored at the image centre; ``size=0`` occludes nothing."""
    return block_mask(h, w, center_block(h, w, size))


def _mask_like(img: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Broadcast a mask against an image, checking that spatial dims agree."""
    if img.shape[-2:] != m.shape[-2:]:
        raise DimensionError(
            f"mask size {tuple(m.shape[-2:])} does not match image size {tuple(img.shape[-2:])}"
        )
    # accepted: (H,W) and (1,H,W) broadcast anywhere; (N,1,H,W) only against a batch
    if m.dim() == 3 and m.shape[0] != 1:
        raise DimensionError(f"a 3-d mask must be (1,H,W), got {tuple(m.shape)}")
    if m.dim() == 4:
        if img.dim() != 4 or m.shape[1] != 1 or m.shape[0] not in (1, img.shape[0]):
            raise DimensionError(
                f"mask shape {tuple(m.shape)} is incompatible with image shape {tuple(img.shape)}"
            )
    elif m.dim() != 2 and m.dim() != 3:
        raise DimensionError(f"mask must be 2-d, 3-d or 4-d, got shape {tuple(m.shape)}")
    return m.to(img.dtype)


def apply_occlusion(img: torch.Tensor, m: torch.Tensor, fill: float = 0.0) -> torch.Tensor:
    """Set occluded pixels to ``fill``, leaving visible pixels untouched."""
    mb = _mask_like(img, m)
    return torch.where(mb > 0.5, img, torch.full_like(img, fill))


def composite(raw: torch.Tensor, occluded_input: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Blend network output into the holes: ``(1 - M) * raw + M * occluded_input``.

    With a binary mask the visible pixels of the result are bit-identical
    to ``occluded_input``.
    """
    if raw.shape != occluded_input.shape:
        raise DimensionError(
            f"raw shape {tuple(raw.shape)} does not match input shape {tuple(occluded_input.shape)}"
        )
    mb = _mask_like(raw, m)
    return (1.0 - mb) * raw + mb * occluded_input


def occluded_fraction(m: torch.Tensor) -> float:
    return float(1.0 - m.float().mean())


def save_mask(m: torch.Tensor, path: PathLike) -> None:
    """Write a mask as a single-channel PNG (0 = occluded, 255 = visible)."""
    arr = m.detach().reshape(m.shape[-2:]).cpu().numpy()
    try:
        Image.fromarray(np.where(arr > 0.5, 255, 0).astype(np.uint8)).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(path, str(exc)) from exc


def load_mask(path: PathLike, size: Optional[tuple[int, int]] = None) -> torch.Tensor:
    img = load_image(path)
    m = (img.mean(dim=0) >= 0.5).float()
    if size is not None and tuple(m.shape) != tuple(size):
        raise DimensionError(f"{path}: mask is {tuple(m.shape)}, expected {tuple(size)}")
    return m
