"""Synthetic OCT-like 9-class image corpus for desk-scale runs and tests.

Every image shows a curved bright retinal band on a dark background with
speckle noise; each class adds its own structural cue (bright lesion under
the band, cyst, bumps, detachment, hole, vertical streak, thinning, spots).
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from .dataset import ClassLabel, save_image


def _band(size, rng):
    y = np.arange(size)[:, None].astype(np.float64)
    x = np.arange(size)[None, :].astype(np.float64)
    centre = size * 0.55 + rng.uniform(-1.5, 1.5) + rng.uniform(0.5, 2.0) * np.cos((x - size / 2) / size * np.pi)
    width = size * 0.09 * rng.uniform(0.85, 1.15)
    band = np.exp(-((y - centre) ** 2) / (2 * width ** 2))
    return band, centre


def _blob(size, cy, cx, ry, rx):
    y = np.arange(size)[:, None]
    x = np.arange(size)[None, :]
    return np.exp(-(((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2))


def blob_image(label: ClassLabel, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One (size, size) uint8 image of the given class."""
    s = size / 32.0
    band, centre = _band(size, rng)
    img = 30 + 150 * band * rng.uniform(0.85, 1.15)
    j = lambda a: rng.uniform(-a, a) * s  # noqa: E731
    mid = size / 2
    c = float(centre[0, int(mid)])
    if label is ClassLabel.CNV:
        img += 140 * _blob(size, c + 5 * s + j(1), mid + j(3), 2.5 * s, 3.5 * s)
    elif label is ClassLabel.DME:
        img *= 1 - 0.9 * _blob(size, c + j(1), mid + j(3), 2.2 * s, 3.0 * s)
    elif label is ClassLabel.DRUSEN:
        for dx in (-6, 0, 6):
            img += 110 * _blob(size, c - 2.5 * s + j(0.5), mid + dx * s + j(1), 1.3 * s, 1.6 * s)
    elif label is ClassLabel.CSC:
        img *= 1 - 0.85 * _blob(size, c - 1.5 * s + j(1), mid + j(3), 1.6 * s, 6.5 * s)
        img += 60 * _blob(size, c - 5 * s + j(1), mid + j(3), 1.2 * s, 6 * s)
    elif label is ClassLabel.MH:
        img *= 1 - 0.95 * _blob(size, c + j(1), mid + j(2), 4.5 * s, 1.8 * s)
    elif label is ClassLabel.MacTel:
        x0 = mid + j(3)
        img += 120 * _blob(size, c + j(1), x0, 6 * s, 0.9 * s)
    elif label is ClassLabel.RP:
        xx = np.arange(size)[None, :]
        fade = 1 / (1 + np.exp(-(np.abs(xx - mid - j(2)) - 6 * s) / (1.2 * s)))
        img = 30 + (img - 30) * (1 - 0.85 * fade)
    elif label is ClassLabel.Stargardt:
        for dx, dy in ((-7, -7), (0, -9), (7, -7)):
            img += 150 * _blob(size, c + dy * s + j(1), mid + dx * s + j(1), 1.0 * s, 1.0 * s)
    img += rng.normal(0, 7, img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def make_corpus(root, counts: Mapping[ClassLabel | str, int], size: int = 32, seed: int = 0) -> Path:
    """Write ``root/<CLASS>/img_00000.png`` files; returns ``root``."""
    root = Path(root)
    for label, n in counts.items():
        label = ClassLabel.parse(label)
        rng = np.random.default_rng([seed, label.index])
        for i in range(n):
            save_image(root / label.name / f"img_{i:05d}.png", blob_image(label, rng, size))
    return root


DESK_COUNTS = {**{c: 200 for c in ClassLabel if c.tier == "major"}, **{c: 10 for c in ClassLabel if c.tier == "rare"}}
