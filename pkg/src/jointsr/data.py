"""Paired training data: a procedural face-like corpus and folder ingestion.

The synthetic faces are drawn with hard edges so the parsing maps agree
with the rendered pixels exactly. Parsing classes are background, skin,
eye and mouth; the five landmarks are the two eye centres, the nose tip and
the two mouth corners.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .imaging import (
    DimensionError,
    ImageIOError,
    PathLike,
    check_scale,
    downsample,
    load_image,
    save_image,
)
from .occlusion import apply_occlusion, block_mask, random_block

PARSING_CLASSES = ("background", "skin", "eye", "mouth")
LANDMARK_NAMES = ("left_eye", "right_eye", "nose_tip", "mouth_left", "mouth_right")
PYRAMID_DEPTH = 3


@dataclass
class Corpus:
    """In-memory image set with optional face-prior ground truth.

    ``landmarks`` is ``(N, L, H, W)`` heatmaps, ``parsing`` is ``(N, P, H, W)``
    one-hot maps; ``has_prior[i]`` is False for images without annotations
    (their prior tensors are zeros).
    """

    hr: torch.Tensor
    landmarks: torch.Tensor
    parsing: torch.Tensor
    has_prior: torch.Tensor
    ids: list[str]
    name: str = "corpus"
    points: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.hr.shape[0]

    @property
    def hr_size(self) -> int:
        return self.hr.shape[-1]

    def subset(self, idx: Sequence[int], name: Optional[str] = None) -> "Corpus":
        idx_t = torch.as_tensor(list(idx), dtype=torch.long)
        return Corpus(
            self.hr[idx_t],
            self.landmarks[idx_t],
            self.parsing[idx_t],
            self.has_prior[idx_t],
            [self.ids[i] for i in idx_t.tolist()],
            name or self.name,
            None if self.points is None else self.points[idx_t],
        )

    def split(self, n_test: int) -> tuple["Corpus", "Corpus"]:
        """Deterministic split: the last ``n_test`` images are held out."""
        if not 0 < n_test < len(self):
            raise ValueError(f"n_test must be in (0, {len(self)}), got {n_test}")
        n = len(self)
        return (self.subset(range(n - n_test), f"{self.name}:train"),
                self.subset(range(n - n_test, n), f"{self.name}:test"))


@dataclass
class SampleRecord:
    hr_gt: torch.Tensor
    lr_gt: torch.Tensor
    lr_occ: torch.Tensor
    mask: torch.Tensor
    landmarks_gt: torch.Tensor
    parsing_gt: torch.Tensor
    id: str
    has_prior: bool = True


def make_record(
    hr: torch.Tensor,
    scale: int,
    mask: torch.Tensor,
    landmarks: torch.Tensor,
    parsing: torch.Tensor,
    id: str,
    has_prior: bool = True,
    fill: float = 0.0,
) -> SampleRecord:
    lr = downsample(hr, scale)
    return SampleRecord(hr, lr, apply_occlusion(lr, mask, fill), mask, landmarks, parsing, id, has_prior)


def validate_record(rec: SampleRecord, scale: int, fill: float = 0.0) -> None:
    """Raise ``ValueError`` if a record breaks its constructive invariants."""
    if not torch.equal(rec.lr_gt, downsample(rec.hr_gt, scale)):
        raise ValueError(f"{rec.id}: lr_gt is not the box downsample of hr_gt")
    if not torch.equal(rec.lr_occ, apply_occlusion(rec.lr_gt, rec.mask, fill)):
        raise ValueError(f"{rec.id}: lr_occ does not match the occluded lr_gt")
    if not torch.all((rec.mask == 0) | (rec.mask == 1)):
        raise ValueError(f"{rec.id}: mask is not binary")
    if rec.has_prior:
        p = rec.parsing_gt
        if not (torch.all((p == 0) | (p == 1)) and torch.all(p.sum(dim=0) == 1)):
            raise ValueError(f"{rec.id}: parsing map is not one-hot")


def gaussian_heatmaps(points: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """One Gaussian bump per (x, y) point, evaluated at pixel centres."""
    centres = np.arange(size, dtype=np.float64) + 0.5
    gx = (centres[None, :] - points[:, 0:1]) ** 2
    gy = (centres[None, :] - points[:, 1:2]) ** 2
    return np.exp(-(gy[:, :, None] + gx[:, None, :]) / (2.0 * sigma ** 2)).astype(np.float32)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return (labels[None] == np.arange(n_classes)[:, None, None]).astype(np.float32)


def render_face(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw one face. Returns ``(image HxWx3, labels HxW, points Lx2)`` in pixel units."""
    c = np.arange(size, dtype=np.float64) + 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    s = float(size)

    top = rng.uniform(0.1, 0.9, 3)
    bottom = np.clip(top + rng.uniform(-0.25, 0.25, 3), 0.0, 1.0)
    t = (yy / s)[..., None]
    img = top * (1 - t) + bottom * t
    labels = np.zeros((size, size), dtype=np.int64)

    cx, cy = s * (0.5 + rng.uniform(-0.04, 0.04)), s * (0.52 + rng.uniform(-0.04, 0.04))
    ax, ay = s * rng.uniform(0.28, 0.35), s * rng.uniform(0.36, 0.44)
    head = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
    tone = rng.uniform(0.35, 0.9)
    skin = np.array([tone, tone * rng.uniform(0.7, 0.85), tone * rng.uniform(0.55, 0.7)])
    light = 1.0 - 0.18 * rng.choice([-1.0, 1.0]) * (xx - cx) / ax
    img[head] = (skin * light[..., None])[head]
    labels[head] = 1

    eye_y = cy - ay * rng.uniform(0.15, 0.3)
    eye_dx = ax * rng.uniform(0.35, 0.5)
    erx = ax * rng.uniform(0.15, 0.22)
    ery = erx * rng.uniform(0.5, 0.75)
    nose_base = cy + ay * rng.uniform(0.12, 0.22)
    nose_half = ax * rng.uniform(0.1, 0.16)
    nose_top = eye_y + ery
    nose = (yy >= nose_top) & (yy <= nose_base)
    nose &= np.abs(xx - cx) <= nose_half * (yy - nose_top) / max(nose_base - nose_top, 1e-6)
    nose &= head
    img[nose] = (skin * 0.78)[None]

    iris = rng.uniform(0.05, 0.35) + rng.uniform(-0.05, 0.05, 3)
    eyes = []
    for sign in (-1.0, 1.0):
        ex = cx + sign * eye_dx
        eye = ((xx - ex) / erx) ** 2 + ((yy - eye_y) / ery) ** 2 <= 1.0
        pupil = ((xx - ex) / (0.45 * erx)) ** 2 + ((yy - eye_y) / ery) ** 2 <= 1.0
        img[eye] = 0.92
        img[eye & pupil] = np.clip(iris, 0.0, 1.0)
        labels[eye] = 2
        eyes.append((ex, eye_y))

    mouth_y = cy + ay * rng.uniform(0.42, 0.55)
    mhw = ax * rng.uniform(0.3, 0.48)
    mhh = ay * rng.uniform(0.04, 0.08)
    mouth = (np.abs(xx - cx) <= mhw) & (np.abs(yy - mouth_y) <= mhh) & head
    img[mouth] = np.array([rng.uniform(0.5, 0.8), rng.uniform(0.1, 0.3), rng.uniform(0.15, 0.3)])
    labels[mouth] = 3

    points = np.array([eyes[0], eyes[1], (cx, nose_base), (cx - mhw, mouth_y), (cx + mhw, mouth_y)])
    return np.clip(img, 0.0, 1.0), labels, points


def heatmap_sigma(size: int) -> float:
    return size / 32.0


def generate_synthetic_corpus(
    n: int,
    hr_size: int = 64,
    seed: int = 0,
    out_dir: Optional[PathLike] = None,
    scale: int = 4,
) -> Corpus:
    """Draw ``n`` face-like images with exact parsing maps and landmark heatmaps.

    Images are quantized to 8 bits so the in-memory corpus equals what is
    read back from ``out_dir``.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    check_scale(scale)
    if hr_size % (2 ** PYRAMID_DEPTH) or hr_size % scale or (hr_size // scale) % (2 ** PYRAMID_DEPTH):
        raise ValueError(
            f"hr_size {hr_size} must be divisible by scale {scale} and leave an LR size "
            f"divisible by {2 ** PYRAMID_DEPTH}"
        )
    rng = np.random.default_rng(seed)
    sigma = heatmap_sigma(hr_size)
    imgs, heats, parses, pts = [], [], [], []
    for _ in range(n):
        img, labels, points = render_face(rng, hr_size)
        imgs.append(np.rint(img * 255.0).astype(np.uint8))
        heats.append(gaussian_heatmaps(points, hr_size, sigma))
        parses.append(labels)
        pts.append(points)
    hr = torch.from_numpy(np.stack(imgs).transpose(0, 3, 1, 2).astype(np.float32) / 255.0)
    corpus = Corpus(
        hr=hr,
        landmarks=torch.from_numpy(np.stack(heats)),
        parsing=torch.from_numpy(np.stack([one_hot(p, len(PARSING_CLASSES)) for p in parses])),
        has_prior=torch.ones(n, dtype=torch.bool),
        ids=[f"{i:05d}" for i in range(n)],
        name=f"synthetic-seed{seed}",
        points=torch.from_numpy(np.stack(pts)),
    )
    if out_dir is not None:
        write_corpus(corpus, out_dir, parse_labels=parses, extra={"seed": seed, "generator": "synthetic"})
    return corpus


def write_corpus(corpus: Corpus, out_dir: PathLike, parse_labels=None, extra: Optional[dict] = None) -> None:
    out = Path(out_dir)
    for sub in ("images", "parsing", "landmarks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    sigma = heatmap_sigma(corpus.hr_size)
    for i, cid in enumerate(corpus.ids):
        save_image(corpus.hr[i], out / "images" / f"{cid}.png")
        if not bool(corpus.has_prior[i]):
            continue
        labels = parse_labels[i] if parse_labels is not None else corpus.parsing[i].argmax(0).numpy()
        Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(out / "parsing" / f"{cid}.png", format="PNG")
        if corpus.points is not None:
            pts = [[round(float(v), 6) for v in p] for p in corpus.points[i].tolist()]
            (out / "landmarks" / f"{cid}.json").write_text(
                json.dumps({"points": pts, "sigma": sigma}, sort_keys=True) + "\n"
            )
    manifest = {
        "n": len(corpus),
        "hr_size": corpus.hr_size,
        "parsing_classes": list(PARSING_CLASSES),
        "landmarks": list(LANDMARK_NAMES),
        **(extra or {}),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _image_dir(root: Path) -> Path:
    return root / "images" if (root / "images").is_dir() else root


def _check_sizes(files: list[Path]) -> tuple[int, int]:
    sizes = {}
    for f in files:
        try:
            with Image.open(f) as im:
                sizes[f] = (im.height, im.width)
        except OSError as exc:
            raise ImageIOError(f, "not a readable image") from exc
    distinct = sorted(set(sizes.values()))
    if len(distinct) > 1:
        common = max(distinct, key=lambda s: sum(v == s for v in sizes.values()))
        offenders = [f"{f.name} ({h}x{w})" for f, (h, w) in sizes.items() if (h, w) != common]
        raise DimensionError(
            f"images differ in size (majority {common[0]}x{common[1]}); offenders: " + ", ".join(offenders)
        )
    return distinct[0]


def _load_priors(root: Path, cid: str, size: int, n_landmarks: int, n_parsing: int):
    lp, pp = root / "landmarks" / f"{cid}.json", root / "parsing" / f"{cid}.png"
    if not (lp.is_file() and pp.is_file()):
        return torch.zeros(n_landmarks, size, size), torch.zeros(n_parsing, size, size), False
    meta = json.loads(lp.read_text())
    points = np.asarray(meta["points"], dtype=np.float64)
    heat = torch.from_numpy(gaussian_heatmaps(points, size, float(meta.get("sigma", heatmap_sigma(size)))))
    with Image.open(pp) as im:
        labels = np.asarray(im.convert("L"), dtype=np.int64)
    if labels.max(initial=0) >= n_parsing:
        raise ValueError(f"{pp}: label {labels.max()} exceeds {n_parsing} parsing classes")
    return heat, torch.from_numpy(one_hot(labels, n_parsing)), True


def _list_images(root: Path) -> list[Path]:
    files = sorted(_image_dir(root).glob("*.png"))
    if not files:
        raise ValueError(f"{root}: no PNG images found")
    return files


def load_corpus(
    directory: PathLike,
    n_landmarks: int = len(LANDMARK_NAMES),
    n_parsing: int = len(PARSING_CLASSES),
    name: Optional[str] = None,
) -> Corpus:
    """Read a folder of equal-sized PNGs (plus optional prior sidecars) into memory."""
    root = Path(directory)
    files = _list_images(root)
    h, w = _check_sizes(files)
    if h != w:
        raise DimensionError(f"{root}: images must be square, got {h}x{w}")
    hrs, heats, parses, flags, ids = [], [], [], [], []
    for f in files:
        img = load_image(f)
        if img.shape[0] == 1:
            img = img.expand(3, -1, -1).clone()
        heat, parse, ok = _load_priors(root, f.stem, h, n_landmarks, n_parsing)
        hrs.append(img)
        heats.append(heat)
        parses.append(parse)
        flags.append(ok)
        ids.append(f.stem)
    return Corpus(torch.stack(hrs), torch.stack(heats), torch.stack(parses),
                  torch.tensor(flags, dtype=torch.bool), ids, name or root.name)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def ingest_folder(
    directory: PathLike,
    scale: int,
    area_fraction: float = 0.25,
    seed: int = 0,
    epoch: int = 0,
    n_landmarks: int = len(LANDMARK_NAMES),
    n_parsing: int = len(PARSING_CLASSES),
    fill: float = 0.0,
) -> Iterator[SampleRecord]:
    """Lazily yield one ``SampleRecord`` per image with a fresh random block mask.

    Masks depend only on ``(seed, epoch)`` and the file order. Sizes are
    checked for every file before the first record is produced.
    """
    check_scale(scale)
    root = Path(directory)
    files = _list_images(root)
    h, w = _check_sizes(files)
    if h % scale or w % scale:
        raise DimensionError(f"{root}: image size {h}x{w} is not divisible by scale {scale}")

    def records() -> Iterator[SampleRecord]:
        rng = epoch_rng(seed, epoch)
        lh, lw = h // scale, w // scale
        for f in files:
            img = load_image(f)
            if img.shape[0] == 1:
                img = img.expand(3, -1, -1).clone()
            heat, parse, ok = _load_priors(root, f.stem, h, n_landmarks, n_parsing)
            mask = block_mask(lh, lw, random_block(lh, lw, area_fraction, rng))
            yield make_record(img, scale, mask, heat, parse, f.stem, ok, fill)

    return records()


def corpus_records(
    corpus: Corpus, scale: int, area_fraction: float = 0.25, seed: int = 0, epoch: int = 0
) -> Iterator[SampleRecord]:
    """Same as :func:`ingest_folder` for an in-memory corpus."""
    rng = epoch_rng(seed, epoch)
    lh = corpus.hr_size // scale
    for i in range(len(corpus)):
        mask = block_mask(lh, lh, random_block(lh, lh, area_fraction, rng))
        yield make_record(corpus.hr[i], scale, mask, corpus.landmarks[i], corpus.parsing[i],
                          corpus.ids[i], bool(corpus.has_prior[i]))
