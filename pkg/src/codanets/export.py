"""PPM images and CSV dumps for inspecting contributions without extra tooling."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def diverging_rgb(values, vmax: float | None = None) -> np.ndarray:
    """Map signed values to 8-bit RGB: blue (negative), white (zero), red (positive).

    The range is symmetric, ``[-vmax, vmax]``, with ``vmax = max|values|`` by default.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-d map, got shape {values.shape}")
    vmax = float(np.abs(values).max()) if vmax is None else float(vmax)
    t = np.clip(values / vmax, -1.0, 1.0) if vmax > 0 else np.zeros_like(values)
    pos, neg = np.maximum(t, 0.0), np.maximum(-t, 0.0)
    r = 1.0 - neg
    g = 1.0 - pos - neg
    b = 1.0 - pos
    return np.rint(np.stack([r, g, b], axis=-1) * 255.0).astype(np.uint8)


def grayscale_rgb(image) -> np.ndarray:
    """``(C, H, W)`` or ``(H, W)`` in [0, 1] to 8-bit RGB (one channel is replicated)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[0] if image.shape[0] == 1 else np.moveaxis(image[:3], 0, -1)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, rgb) -> Path:
    """Binary PPM (P6, maxval 255)."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB data, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only 8-bit P6 files are supported")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1:pos + 1 + 3 * w * h], dtype=np.uint8).reshape(h, w, 3)


def write_heatmap_ppm(path, values, scale: int = 1, vmax: float | None = None) -> Path:
    rgb = diverging_rgb(values, vmax)
    if scale > 1:
        rgb = rgb.repeat(scale, axis=0).repeat(scale, axis=1)
    return write_ppm(path, rgb)


def write_contributions_csv(path, contributions) -> Path:
    """One row per flattened (C-order) index: ``index, value``."""
    flat = np.asarray(contributions, dtype=np.float64).reshape(-1)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "value"])
        for i, v in enumerate(flat):
            writer.writerow([i, repr(float(v))])
    return path
