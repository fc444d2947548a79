"""Image tensors, resampling and PNG I/O.

Images are float tensors in [0, 1] shaped ``(C, H, W)`` or batched
``(N, C, H, W)`` with ``C`` in {1, 3}. Every function here is pure.
"""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

SCALE_FACTORS = (2, 4, 8)

PathLike = Union[str, Path]


class DimensionError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


class ImageIOError(OSError):
    """Raised when an image file cannot be read or written."""

    def __init__(self, path: PathLike, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


def check_image(img: torch.Tensor, name: str = "image") -> torch.Tensor:
    """Validate an image tensor's rank, channel count and size."""
    if not isinstance(img, torch.Tensor):
        raise TypeError(f"{name} must be a torch.Tensor, got {type(img).__name__}")
    if img.dim() not in (3, 4):
        raise DimensionError(f"{name} must be (C,H,W) or (N,C,H,W), got shape {tuple(img.shape)}")
    c, h, w = img.shape[-3:]
    if c not in (1, 3):
        raise DimensionError(f"{name} must have 1 or 3 channels, got {c}")
    if h < 1 or w < 1:
        raise DimensionError(f"{name} has empty spatial dims {h}x{w}")
    return img


def check_scale(s: int) -> int:
    if s not in SCALE_FACTORS:
        raise ValueError(f"scale factor must be one of {SCALE_FACTORS}, got {s}")
    return s


def _as_batch(img: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if img.dim() == 3:
        return img.unsqueeze(0), True
    return img, False


def downsample(img: torch.Tensor, s: int) -> torch.Tensor:
    """Box-filter downsampling by an integer factor.

    Each output pixel is the mean of an ``s x s`` input block, so the
    image mean and the [0, 1] range are preserved exactly.
    """
    check_image(img)
    check_scale(s)
    h, w = img.shape[-2:]
    if h % s or w % s:
        raise DimensionError(f"image size {h}x{w} is not divisible by scale {s}")
    x, squeeze = _as_batch(img)
    out = F.avg_pool2d(x, kernel_size=s, stride=s)
    return out[0] if squeeze else out


def upsample_bicubic(img: torch.Tensor, s: int) -> torch.Tensor:
    """Bicubic upsampling (Keys kernel, a = -0.75, half-pixel centres), clamped to [0, 1]."""
    check_image(img)
    check_scale(s)
    x, squeeze = _as_batch(img)
    out = F.interpolate(x, scale_factor=s, mode="bicubic", align_corners=False)
    out = out.clamp(0.0, 1.0)
    return out[0] if squeeze else out


def upsample_nearest(img: torch.Tensor, s: int) -> torch.Tensor:
    """Nearest-neighbour upsampling; keeps binary masks binary."""
    squeeze = img.dim() < 4
    x = img
    while x.dim() < 4:
        x = x.unsqueeze(0)
    out = x.repeat_interleave(s, dim=-2).repeat_interleave(s, dim=-1)
    if squeeze:
        out = out.reshape(*img.shape[:-2], out.shape[-2], out.shape[-1])
    return out


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """Round-to-nearest quantization of a (C,H,W) image to an (H,W[,C]) uint8 array."""
    check_image(img)
    if img.dim() != 3:
        raise DimensionError("to_uint8 expects a single (C,H,W) image")
    arr = img.detach().to(torch.float64).clamp(0.0, 1.0).cpu().numpy()
    arr = np.rint(arr * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        return arr[0]
    return np.ascontiguousarray(arr.transpose(1, 2, 0))


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def load_image(path: PathLike) -> torch.Tensor:
    """Read an 8-bit PNG into a float (C,H,W) tensor in [0, 1].

    Grayscale files give one channel; RGB and RGBA files give three
    (alpha is dropped). Palette images are expanded to RGB.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(path, "no such file")
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageIOError(path, f"unsupported format {im.format}; only PNG is accepted")
            if im.mode in ("L", "1", "LA"):
                arr = np.asarray(im.convert("L"))
            elif im.mode in ("RGB", "RGBA", "P"):
                arr = np.asarray(im.convert("RGB"))
            else:
                raise ImageIOError(path, f"unsupported PNG mode {im.mode}; expected 8-bit L or RGB")
    except UnidentifiedImageError as exc:
        raise ImageIOError(path, "not a readable image") from exc
    return from_uint8(arr)


def save_image(img: torch.Tensor, path: PathLike) -> None:
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise ImageIOError(path, "only .png output is supported")
    arr = to_uint8(img)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(path, str(exc)) from exc
