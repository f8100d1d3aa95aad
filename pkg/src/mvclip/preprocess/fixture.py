"""Synthetic 16-bit Cell Painting-like input trees for tests and demos."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mvclip.preprocess.image import N_CHANNELS, write_tiff16


@dataclass(frozen=True)
class WellSpec:
    source: str
    batch: str
    plate: str
    well: str
    n_views: int
    is_control: bool = False
    compound_id: str = ""


def synthetic_plane(rng: np.random.Generator, shape: tuple[int, int], hot_pixels: int = 3) -> np.ndarray:
    """Dim noisy background with a few bright nuclei-like blobs and hot pixels."""
    h, w = shape
    img = rng.normal(400.0, 40.0, size=shape)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(3, 9))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.03, 0.1) * min(h, w)
        img += rng.uniform(1500, 8000) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    img = np.clip(img, 0, 65535).astype(np.uint16)
    for _ in range(hot_pixels):
        img[rng.integers(0, h), rng.integers(0, w)] = 65535
    return img


def make_fixture(root, wells, shape=(256, 256), seed: int = 0) -> Path:
    """Write a source/batch/plate/well/view/channel TIFF tree under ``root``."""
    root = Path(root)
    for n, spec in enumerate(wells):
        well_dir = root / spec.source / spec.batch / spec.plate / spec.well
        rng = np.random.default_rng([seed, n])
        for v in range(spec.n_views):
            vdir = well_dir / f"v{v}"
            vdir.mkdir(parents=True, exist_ok=True)
            for c in range(N_CHANNELS):
                write_tiff16(vdir / f"ch{c}.tif", synthetic_plane(rng, shape))
        meta = {
            "compound_id": spec.compound_id or ("CONTROL" if spec.is_control else f"CPD_{n:04d}"),
            "is_control": spec.is_control,
        }
        (well_dir / "well.json").write_text(json.dumps(meta, sort_keys=True))
    return root


def small_layout(n_sources: int = 2, wells_per_source: int = 2) -> list[WellSpec]:
    """Two sources, one plate each; first well of every source is a control."""
    out = []
    for s in range(n_sources):
        views = 9 if s % 2 == 0 else 6
        for w in range(wells_per_source):
            out.append(WellSpec(f"source_{s + 1}", "B1", "P1", f"A{w + 1:02d}", views, is_control=(w == 0)))
    return out


def mixed_view_layout() -> list[WellSpec]:
    """Well mix whose view sampling cuts the image count by about 1.8.

    Four sources acquired 9 fields per well (treatment 9 -> 6, control 9 -> 3)
    and one acquired 6 (treatment kept whole). Expected factor 228/129 ~ 1.77.
    """
    out = []
    for s in range(4):
        for w in range(6):
            out.append(WellSpec(f"source_{s + 1}", "B1", "P1", f"A{w + 1:02d}", 9, is_control=w < 2))
    out.append(WellSpec("source_5", "B1", "P1", "A01", 6, is_control=True))
    out.append(WellSpec("source_5", "B1", "P1", "A02", 6))
    return out
