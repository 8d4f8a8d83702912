"""Samples, synthetic crowd scenes and training-time augmentation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio
from .autodiff.ops import resize_array
from .density import PointAnnotations

PROFILES = ("sparse", "dense", "gradient")
SYNTH_SIZE = 64
N_RANDOM_CROPS = 10
SCALES = (0.8, 1.0, 1.2)


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    annotations: PointAnnotations
    roi: np.ndarray | None = None  # (H, W) of {0, 1}
    name: str = ""

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    @property
    def count(self) -> int:
        return len(self.annotations)


def _round16(v: int) -> int:
    return (v // 16) * 16


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def _scene_points(profile: str, rng: np.random.Generator, size: int) -> np.ndarray:
    if profile == "sparse":
        n = int(rng.integers(3, 11))
        return rng.uniform(0, size, size=(n, 2))
    if profile == "dense":
        n = int(rng.integers(30, 61))
        return rng.uniform(0, size, size=(n, 2))
    if profile == "gradient":
        # row density grows linearly towards the bottom edge
        n = int(rng.integers(10, 41))
        xs = rng.uniform(0, size, size=n)
        ys = size * np.sqrt(rng.uniform(0, 1, size=n))
        return np.stack([xs, np.minimum(ys, np.nextafter(size, 0))], axis=1)
    raise ValueError(f"unknown density profile {profile!r}; choose from {PROFILES}")


def render_scene(points: np.ndarray, rng: np.random.Generator, size: int = SYNTH_SIZE) -> np.ndarray:
    img = rng.uniform(0.0, 0.25, size=(3, size, size))
    tint = rng.uniform(0.75, 1.0, size=3)
    for x, y in points:
        cx, cy = int(x), int(y)
        y0, y1 = max(cy - 1, 0), min(cy + 2, size)
        x0, x1 = max(cx - 1, 0), min(cx + 2, size)
        img[:, y0:y1, x0:x1] = tint[:, None, None]
    return img.astype(np.float32)


def synth_dataset(n_images: int, density_profile: str = "sparse", seed: int = 0) -> list[Sample]:
    if density_profile not in PROFILES:
        raise ValueError(f"unknown density profile {density_profile!r}; choose from {PROFILES}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_images):
        pts = _scene_points(density_profile, rng, SYNTH_SIZE)
        img = render_scene(pts, rng)
        out.append(Sample(img, PointAnnotations(pts, SYNTH_SIZE, SYNTH_SIZE), name=f"synth_{i:04d}"))
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def crop(s: Sample, x0: int, y0: int, w: int, h: int, name: str = "") -> Sample:
    pts = s.annotations.points
    keep = (pts[:, 0] >= x0) & (pts[:, 0] < x0 + w) & (pts[:, 1] >= y0) & (pts[:, 1] < y0 + h)
    local = pts[keep] - np.array([x0, y0], dtype=np.float64)
    roi = None if s.roi is None else s.roi[y0:y0 + h, x0:x0 + w].copy()
    return Sample(s.image[:, y0:y0 + h, x0:x0 + w].copy(), PointAnnotations(local, w, h), roi, name)


def rescale(s: Sample, factor: float, name: str = "") -> Sample:
    """Bilinear resize by ``factor`` then trim to multiples of 16."""
    h, w = max(1, round(s.height * factor)), max(1, round(s.width * factor))
    img = np.clip(resize_array(s.image, h, w), 0, 1)
    sx, sy = w / s.width, h / s.height
    pts = s.annotations.points * np.array([sx, sy])
    pts[:, 0] = np.minimum(pts[:, 0], np.nextafter(w, 0))
    pts[:, 1] = np.minimum(pts[:, 1], np.nextafter(h, 0))
    roi = None
    if s.roi is not None:
        roi = (resize_array(s.roi.astype(np.float32)[None], h, w)[0] >= 0.5).astype(np.float32)
    scaled = Sample(img.astype(np.float32), PointAnnotations(pts, w, h), roi, name)
    return crop(scaled, 0, 0, _round16(w), _round16(h), name)


def augment(s: Sample, rng: np.random.Generator) -> list[Sample]:
    """4 quarter crops, 10 random crops of the same size, and 3 rescaled copies."""
    if s.height < 32 or s.width < 32:
        raise ValueError(f"augmentation needs at least 32x32, got {s.height}x{s.width}")
    ch, cw = _round16(s.height // 2), _round16(s.width // 2)
    out = []
    corners = [(0, 0), (s.width - cw, 0), (0, s.height - ch), (s.width - cw, s.height - ch)]
    for q, (x0, y0) in enumerate(corners):
        out.append(crop(s, x0, y0, cw, ch, f"{s.name}.q{q}"))
    for r in range(N_RANDOM_CROPS):
        x0 = int(rng.integers(0, s.width - cw + 1))
        y0 = int(rng.integers(0, s.height - ch + 1))
        out.append(crop(s, x0, y0, cw, ch, f"{s.name}.r{r}"))
    for f in SCALES:
        out.append(rescale(s, f, f"{s.name}.x{f:g}"))
    return out


# ---------------------------------------------------------------------------
# directories
# ---------------------------------------------------------------------------

def save_dataset(samples: list[Sample], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        fileio.write_image(d / f"{s.name}.ppm", s.image)
        fileio.write_points(d / f"{s.name}.csv", s.annotations.points)
        if s.roi is not None:
            fileio.write_mask(d / f"{s.name}.roi.dmap", s.roi)


def load_dataset(directory) -> list[Sample]:
    """Images with sidecar ``<stem>.csv`` annotations and optional ``<stem>.roi.dmap``."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory not found: {d}")
    out = []
    for img_path in fileio.list_images(d):
        ann_path = img_path.with_suffix(".csv")
        if not ann_path.exists():
            raise FileNotFoundError(f"missing annotation file: {ann_path}")
        img = fileio.read_image(img_path)
        _, h, w = img.shape
        ann = PointAnnotations(fileio.read_points(ann_path), w, h)
        roi_path = d / f"{img_path.stem}.roi.dmap"
        roi = fileio.read_mask(roi_path) if roi_path.exists() else None
        out.append(Sample(img, ann, roi, img_path.stem))
    return out


def dataset_hash(samples: list[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(s.name.encode())
        h.update(np.ascontiguousarray(s.image, dtype=np.float32).tobytes())
        h.update(np.ascontiguousarray(s.annotations.points, dtype=np.float64).tobytes())
        if s.roi is not None:
            h.update(np.ascontiguousarray(s.roi, dtype=np.float32).tobytes())
    return h.hexdigest()[:16]
