"""On-disk formats: annotation CSV, DMAP maps/masks, netpbm images and PGM heatmaps."""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

DMAP_MAGIC = b"DMAP"
DMAP_VERSION = 1
IMAGE_SUFFIXES = (".ppm", ".pgm")


class DataFormatError(ValueError):
    pass


def write_points(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    with open(path, "w", newline="") as f:
        for x, y in pts:
            f.write(f"{float(x)!r},{float(y)!r}\n")


def read_points(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), 1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'x,y', got {row!r}")
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError as e:
                raise DataFormatError(f"{path}:{lineno}: {e}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def dmap_bytes(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError("DMAP holds a 2-D grid")
    h, w = grid.shape
    return DMAP_MAGIC + struct.pack("<III", DMAP_VERSION, h, w) + np.ascontiguousarray(grid, dtype="<f4").tobytes()


def write_dmap(path, grid: np.ndarray) -> None:
    Path(path).write_bytes(dmap_bytes(grid))


def read_dmap(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != DMAP_MAGIC:
        raise DataFormatError(f"{path}: bad magic")
    if len(blob) < 16:
        raise DataFormatError(f"{path}: truncated header")
    version, h, w = struct.unpack("<III", blob[4:16])
    if version != DMAP_VERSION:
        raise DataFormatError(f"{path}: unsupported DMAP version {version}")
    if len(blob) != 16 + 4 * h * w:
        raise DataFormatError(f"{path}: expected {16 + 4 * h * w} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=16).reshape(h, w).astype(np.float32)


def write_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("ROI mask must contain only 0 and 1")
    write_dmap(path, m.astype(np.float32))


def read_mask(path) -> np.ndarray:
    m = read_dmap(path)
    if not np.isin(m, (0.0, 1.0)).all():
        raise DataFormatError(f"{path}: ROI mask must contain only 0 and 1")
    return m


def write_pgm_heatmap(path, grid: np.ndarray) -> None:
    g = np.asarray(grid, dtype=np.float64)
    peak = g.max() if g.size else 0.0
    if peak > 0:
        pix = np.clip(np.round(np.maximum(g, 0) / peak * 255), 0, 255).astype(np.uint8)
    else:
        pix = np.zeros(g.shape, dtype=np.uint8)
    h, w = g.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def _netpbm_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError("truncated netpbm header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1


def read_image(path) -> np.ndarray:
    """Read a binary PPM (P6) or PGM (P5) as float32 ``(3, H, W)`` in [0, 1]."""
    blob = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), pos = _netpbm_tokens(blob, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError):
        raise DataFormatError(f"{path}: malformed netpbm header") from None
    if magic not in (b"P5", b"P6") or not 0 < maxval < 256:
        raise DataFormatError(f"{path}: only 8-bit binary P5/P6 images are supported")
    chans = 3 if magic == b"P6" else 1
    need = w * h * chans
    if len(blob) - pos < need:
        raise DataFormatError(f"{path}: truncated pixel data")
    pix = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos).reshape(h, w, chans)
    img = pix.transpose(2, 0, 1).astype(np.float32) / np.float32(maxval)
    return np.repeat(img, 3, axis=0) if chans == 1 else img


def write_image(path, img: np.ndarray) -> None:
    """Write a ``(3, H, W)`` float image in [0, 1] as binary PPM."""
    _, h, w = img.shape
    pix = np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pix.tobytes())


def image_size(path) -> tuple[int, int]:
    """(width, height) from the netpbm header without decoding pixels."""
    blob = Path(path).read_bytes()[:256]
    try:
        (_, w, h), _ = _netpbm_tokens(blob, 3)
        return int(w), int(h)
    except (ValueError, IndexError):
        raise DataFormatError(f"{path}: malformed netpbm header") from None


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
