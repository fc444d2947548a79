"""Trainable networks: completion module, SR module, compound generator,
patch discriminator and face-prior predictor.

All networks take batched ``(N, C, H, W)`` tensors. The generator's image
outputs pass through a sigmoid, so they always lie in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import DimensionError
from .occlusion import composite

FC_VARIANTS = ("plain-conv", "partial-conv")
SR_VARIANTS = ("residual-upsampler", "coarse-to-fine")


@dataclass
class ModelConfig:
    """Architecture descriptor; embedded in every checkpoint."""

    fc_variant: str = "plain-conv"
    sr_variant: str = "residual-upsampler"
    scale: int = 4
    channels: int = 3
    fc_width: int = 32
    fc_depth: int = 4
    sr_width: int = 32
    sr_blocks: int = 4
    disc_width: int = 32
    disc_depth: int = 3
    prior_width: int = 32
    n_landmarks: int = 5
    n_parsing: int = 4

    def __post_init__(self) -> None:
        if self.fc_variant not in FC_VARIANTS:
            raise ValueError(f"fc_variant must be one of {FC_VARIANTS}, got {self.fc_variant!r}")
        if self.sr_variant not in SR_VARIANTS:
            raise ValueError(f"sr_variant must be one of {SR_VARIANTS}, got {self.sr_variant!r}")
        if self.scale not in (2, 4, 8):
            raise ValueError(f"scale must be 2, 4 or 8, got {self.scale}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and v < 1:
                raise ValueError(f"{f.name} must be positive, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _logit(x: torch.Tensor, eps: float = 1e-2) -> torch.Tensor:
    x = x.clamp(eps, 1.0 - eps)
    return torch.log(x) - torch.log1p(-x)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class PartialConv2d(nn.Module):
    """Mask-aware convolution with a single-channel validity mask.

    The response is computed from valid pixels only and rescaled by
    ``window_size / valid_count``; windows with no valid pixel output zero
    (bias included) and are marked invalid in the returned mask.
    """

    def __init__(self, cin: int, cout: int, kernel_size: int = 3, stride: int = 1, padding: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel_size, stride=stride, padding=padding)
        self.register_buffer("ones", torch.ones(1, 1, kernel_size, kernel_size), persistent=False)
        self.window = float(kernel_size * kernel_size)
        self.stride = stride
        self.padding = padding

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        with torch.no_grad():
            count = F.conv2d(mask, self.ones.to(mask.dtype), stride=self.stride, padding=self.padding)
            new_mask = (count > 0).to(x.dtype)
            ratio = self.window / count.clamp(min=1.0) * new_mask
        raw = F.conv2d(x * mask, self.conv.weight, None, self.stride, self.padding)
        out = raw * ratio + self.conv.bias.view(1, -1, 1, 1)
        return out * new_mask, new_mask


def _pad_to_multiple(x: torch.Tensor, k: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph, pw = (-h) % k, (-w) % k
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


class PlainFC(nn.Module):
    """U-shaped encoder-decoder over the occluded image and its mask."""

    def __init__(self, channels: int = 3, width: int = 32, depth: int = 4):
        super().__init__()
        self.depth = depth
        widths = [min(width * 2 ** i, width * 4) for i in range(depth + 1)]
        self.stem = nn.Conv2d(channels + 1, widths[0], 3, padding=1)
        self.down = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1) for i in range(depth)
        )
        self.up = nn.ModuleList(
            nn.Conv2d(widths[i + 1] + widths[i], widths[i], 3, padding=1) for i in reversed(range(depth))
        )
        self.head = nn.Conv2d(widths[0], channels, 3, padding=1)

    def forward(self, img: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = torch.cat([img, mask], dim=1)
        x, (h, w) = _pad_to_multiple(x, 2 ** self.depth)
        x = F.leaky_relu(self.stem(x), 0.2)
        skips = [x]
        for conv in self.down:
            x = F.leaky_relu(conv(x), 0.2)
            skips.append(x)
        skips.pop()
        for conv in self.up:
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = F.relu(conv(torch.cat([x, skip], dim=1)))
        return torch.sigmoid(self.head(x))[..., :h, :w]


class PartialFC(nn.Module):
    """U-shaped encoder-decoder whose convolutions are mask-aware."""

    def __init__(self, channels: int = 3, width: int = 32, depth: int = 4):
        super().__init__()
        self.depth = depth
        widths = [min(width * 2 ** i, width * 4) for i in range(depth + 1)]
        self.stem = PartialConv2d(channels, widths[0], 3, padding=1)
        self.down = nn.ModuleList(
            PartialConv2d(widths[i], widths[i + 1], 4, stride=2, padding=1) for i in range(depth)
        )
        self.up = nn.ModuleList(
            PartialConv2d(widths[i + 1] + widths[i], widths[i], 3, padding=1) for i in reversed(range(depth))
        )
        self.head = PartialConv2d(widths[0] + channels, channels, 3, padding=1)

    def forward(self, img: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        k = 2 ** self.depth
        x, (h, w) = _pad_to_multiple(img, k)
        m = F.pad(mask, (0, x.shape[-1] - w, 0, x.shape[-2] - h), value=0.0)
        inputs = (x, m)
        x, m = self.stem(x, m)
        x = F.leaky_relu(x, 0.2)
        skips = [(x, m)]
        for conv in self.down:
            x, m = conv(x, m)
            x = F.leaky_relu(x, 0.2)
            skips.append((x, m))
        skips.pop()
        for conv in self.up:
            sx, sm = skips.pop()
            x = F.interpolate(x, size=sx.shape[-2:], mode="nearest")
            m = F.interpolate(m, size=sm.shape[-2:], mode="nearest")
            x, m = conv(torch.cat([x, sx], dim=1), torch.maximum(m, sm))
            x = F.relu(x)
        x = F.interpolate(x, size=inputs[0].shape[-2:], mode="nearest")
        x, _ = self.head(torch.cat([x, inputs[0]], dim=1), torch.ones_like(inputs[1]))
        return torch.sigmoid(x)[..., :h, :w]


class FCModule(nn.Module):
    """Completion module: returns the raw output and its composite with the visible input."""

    def __init__(self, variant: str = "plain-conv", channels: int = 3, width: int = 32, depth: int = 4):
        super().__init__()
        if variant not in FC_VARIANTS:
            raise ValueError(f"unknown FC variant {variant!r}")
        self.variant = variant
        net_cls = PlainFC if variant == "plain-conv" else PartialFC
        self.net = net_cls(channels, width, depth)

    def forward(self, img_occ: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if img_occ.dim() != 4 or mask.dim() != 4 or mask.shape[1] != 1:
            raise DimensionError("expected image (N,C,H,W) and mask (N,1,H,W)")
        if img_occ.shape[-2:] != mask.shape[-2:] or img_occ.shape[0] != mask.shape[0]:
            raise DimensionError(
                f"mask {tuple(mask.shape)} is not aligned with image {tuple(img_occ.shape)}"
            )
        raw = self.net(img_occ, mask)
        return raw, composite(raw, img_occ, mask)


class ResidualUpsampler(nn.Module):
    """Residual trunk followed by log2(scale) sub-pixel x2 stages.

    The output is predicted as a logit offset on the bicubic upsample of the
    input, so an untrained network starts near bicubic interpolation.
    """

    def __init__(self, scale: int = 4, channels: int = 3, width: int = 32, blocks: int = 4):
        super().__init__()
        self.scale = scale
        self.head = nn.Conv2d(channels, width, 3, padding=1)
        self.body = nn.Sequential(*[ResBlock(width) for _ in range(blocks)])
        self.body_tail = nn.Conv2d(width, width, 3, padding=1)
        ups = []
        for _ in range(int(math.log2(scale))):
            ups += [nn.Conv2d(width, width * 4, 3, padding=1), nn.PixelShuffle(2), nn.ReLU()]
        self.upsample = nn.Sequential(*ups)
        self.tail = nn.Conv2d(width, channels, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        base = F.interpolate(lr, scale_factor=self.scale, mode="bicubic", align_corners=False)
        x = self.head(lr)
        x = x + self.body_tail(self.body(x))
        x = self.upsample(x)
        return torch.sigmoid(self.tail(x) + _logit(base))


class FacePriorNet(nn.Module):
    """Shared trunk with a landmark-heatmap head (sigmoid) and a parsing head (softmax)."""

    def __init__(self, channels: int = 3, width: int = 32, n_landmarks: int = 5, n_parsing: int = 4):
        super().__init__()
        self.n_landmarks = n_landmarks
        self.n_parsing = n_parsing
        self.stem = nn.Conv2d(channels, width, 3, padding=1)
        self.down = nn.Conv2d(width, width * 2, 4, stride=2, padding=1)
        self.body = nn.Sequential(ResBlock(width * 2), ResBlock(width * 2))
        self.up = nn.Conv2d(width * 2 + width, width, 3, padding=1)
        self.landmark_head = nn.Conv2d(width, n_landmarks, 3, padding=1)
        self.parsing_head = nn.Conv2d(width, n_parsing, 3, padding=1)

    def forward(self, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if img.dim() != 4:
            raise DimensionError(f"expected (N,C,H,W), got {tuple(img.shape)}")
        h, w = img.shape[-2:]
        if h % 2 or w % 2:
            raise DimensionError(f"face-prior input {h}x{w} must have even dims")
        s = F.relu(self.stem(img))
        x = self.body(F.relu(self.down(s)))
        x = F.interpolate(x, size=(h, w), mode="nearest")
        x = F.relu(self.up(torch.cat([x, s], dim=1)))
        return torch.sigmoid(self.landmark_head(x)), torch.softmax(self.parsing_head(x), dim=1)


class CoarseToFineSR(nn.Module):
    """Coarse upsampler, prior estimation on the coarse result, prior-conditioned refinement."""

    def __init__(
        self,
        scale: int = 4,
        channels: int = 3,
        width: int = 32,
        blocks: int = 4,
        n_landmarks: int = 5,
        n_parsing: int = 4,
    ):
        super().__init__()
        self.scale = scale
        self.coarse = ResidualUpsampler(scale, channels, width, max(1, blocks // 2))
        self.prior = FacePriorNet(channels, width // 2, n_landmarks, n_parsing)
        self.encode = nn.Conv2d(channels, width, 3, padding=1)
        self.fuse = nn.Conv2d(width + n_landmarks + n_parsing, width, 3, padding=1)
        self.refine = nn.Sequential(*[ResBlock(width) for _ in range(max(1, blocks // 2))])
        self.tail = nn.Conv2d(width, channels, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        coarse = self.coarse(lr)
        heat, parse = self.prior(coarse)
        x = F.relu(self.encode(coarse))
        x = F.relu(self.fuse(torch.cat([x, heat, parse], dim=1)))
        x = self.refine(x)
        return torch.sigmoid(self.tail(x) + _logit(coarse))


class SRModule(nn.Module):
    def __init__(self, variant: str = "residual-upsampler", scale: int = 4, channels: int = 3,
                 width: int = 32, blocks: int = 4, n_landmarks: int = 5, n_parsing: int = 4):
        super().__init__()
        if variant not in SR_VARIANTS:
            raise ValueError(f"unknown SR variant {variant!r}")
        self.variant = variant
        self.scale = scale
        if variant == "residual-upsampler":
            self.net = ResidualUpsampler(scale, channels, width, blocks)
        else:
            self.net = CoarseToFineSR(scale, channels, width, blocks, n_landmarks, n_parsing)

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        if lr.dim() != 4:
            raise DimensionError(f"expected (N,C,H,W), got {tuple(lr.shape)}")
        return self.net(lr)


class CompoundGenerator(nn.Module):
    """Completion followed by super-resolution of the composited result."""

    def __init__(self, fc: FCModule, sr: SRModule):
        super().__init__()
        self.fc = fc
        self.sr = sr

    @property
    def scale(self) -> int:
        return self.sr.scale

    def forward(self, img_occ: torch.Tensor, mask: torch.Tensor):
        """Returns ``(raw_lr, completed_lr, hr)``."""
        raw, completed = self.fc(img_occ, mask)
        return raw, completed, self.sr(completed)


class PatchDiscriminator(nn.Module):
    """Strided conv stack ending in a per-patch sigmoid score map."""

    def __init__(self, channels: int = 3, width: int = 32, depth: int = 3):
        super().__init__()
        layers = []
        cin = channels
        for i in range(depth):
            cout = width * 2 ** i
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.score = nn.Conv2d(cin, 1, 3, padding=1)
        self.depth = depth

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4:
            raise DimensionError(f"expected (N,C,H,W), got {tuple(img.shape)}")
        k = 2 ** self.depth
        if img.shape[-1] % k or img.shape[-2] % k:
            raise DimensionError(f"discriminator input {tuple(img.shape[-2:])} must be divisible by {k}")
        return torch.sigmoid(self.score(self.features(img)))

    def score_shape(self, h: int, w: int) -> tuple[int, int, int]:
        k = 2 ** self.depth
        return (1, h // k, w // k)

    def receptive_field(self) -> int:
        r, jump = 1, 1
        for _ in range(self.depth):
            r += 3 * jump
            jump *= 2
        return r + 2 * jump


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def build_fc(cfg: ModelConfig, seed: int = 0) -> FCModule:
    return _seeded(seed, lambda: FCModule(cfg.fc_variant, cfg.channels, cfg.fc_width, cfg.fc_depth))


def build_sr(cfg: ModelConfig, seed: int = 0) -> SRModule:
    return _seeded(seed, lambda: SRModule(cfg.sr_variant, cfg.scale, cfg.channels, cfg.sr_width,
                                          cfg.sr_blocks, cfg.n_landmarks, cfg.n_parsing))


def build_generator(cfg: ModelConfig, seed: int = 0) -> CompoundGenerator:
    return CompoundGenerator(build_fc(cfg, seed), build_sr(cfg, seed + 1))


def build_discriminator(cfg: ModelConfig, seed: int = 0) -> PatchDiscriminator:
    return _seeded(seed, lambda: PatchDiscriminator(cfg.channels, cfg.disc_width, cfg.disc_depth))


def build_face_prior(cfg: ModelConfig, seed: int = 0) -> FacePriorNet:
    return _seeded(seed, lambda: FacePriorNet(cfg.channels, cfg.prior_width, cfg.n_landmarks, cfg.n_parsing))
