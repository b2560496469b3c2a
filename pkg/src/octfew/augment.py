"""Linear augmentation: translation, rotation, zoom-in, brightness, horizontal flip."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .dataset import ImageRecord, Provenance, load_image, save_image
from .seeds import derive_seed


@dataclass(frozen=True)
class AugmentationSpec:
    translate_frac: float = 0.05
    rotate_deg: float = 30.0
    zoom_frac: float = 0.20
    brightness_frac: float = 0.10
    hflip_prob: float = 0.5

    def __post_init__(self):
        for name in ("translate_frac", "rotate_deg", "zoom_frac", "brightness_frac"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")


IDENTITY_SPEC = AugmentationSpec(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SampledParams:
    dx: float = 0.0
    dy: float = 0.0
    theta: float = 0.0
    zoom: float = 0.0
    brightness: float = 0.0
    flip: bool = False
    seed: int | None = None

    def within(self, spec: AugmentationSpec) -> bool:
        return (abs(self.dx) <= spec.translate_frac and abs(self.dy) <= spec.translate_frac
                and abs(self.theta) <= spec.rotate_deg and 0.0 <= self.zoom <= spec.zoom_frac
                and abs(self.brightness) <= spec.brightness_frac)


def sample_params(spec: AugmentationSpec, seed: int) -> SampledParams:
    rng = np.random.default_rng(seed)
    t, r, b = spec.translate_frac, spec.rotate_deg, spec.brightness_frac
    return SampledParams(
        dx=float(rng.uniform(-t, t)),
        dy=float(rng.uniform(-t, t)),
        theta=float(rng.uniform(-r, r)),
        zoom=float(rng.uniform(0.0, spec.zoom_frac)),
        brightness=float(rng.uniform(-b, b)),
        flip=bool(rng.random() < spec.hflip_prob),
        seed=seed,
    )


def inverse_matrix(params: SampledParams, height: int, width: int) -> np.ndarray:
    """Output-to-input pixel map of translate -> rotate -> zoom (about the centre)."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    tx, ty = params.dx * width, params.dy * height
    s = 1.0 + params.zoom
    a = math.radians(params.theta)
    c, si = math.cos(a), math.sin(a)
    # forward: q = C + s R (p + t - C); inverse: p = R^T (q - C) / s + C - t
    inv = np.array([[c / s, si / s, 0.0], [-si / s, c / s, 0.0]])
    inv[0, 2] = -(inv[0, 0] * cx + inv[0, 1] * cy) + cx - tx
    inv[1, 2] = -(inv[1, 0] * cx + inv[1, 1] * cy) + cy - ty
    return inv


def apply(image: np.ndarray, params: SampledParams) -> np.ndarray:
    """Warp in one bilinear pass, scale brightness, clamp, then optionally mirror."""
    image = np.asarray(image)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    h, w = image.shape[:2]
    out = kernels.warp_affine(image, inverse_matrix(params, h, w))
    out = np.floor(out * (1.0 + params.brightness) + 0.5)
    out = np.clip(out, 0, 255).astype(np.uint8)
    if params.flip:
        out = out[:, ::-1].copy()
    return out[..., 0] if squeeze else out


def _safe_name(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", s)


def augment_to_count(records: Sequence[ImageRecord], target: int, spec: AugmentationSpec, seed: int,
                     out_dir, loader: Callable[[str], np.ndarray] = load_image) -> list[ImageRecord]:
    """Return originals plus ``target - len(records)`` augmented copies.

    Sources are taken round-robin over ``records``; output index ``i`` uses the
    seed ``derive_seed(seed, i)``.  New images are written as PNG under ``out_dir``.
    """
    records = list(records)
    if not records:
        raise ValueError("augment_to_count needs at least one source record")
    if target < len(records):
        raise ValueError(f"target {target} is smaller than the {len(records)} input records")
    out_dir = Path(out_dir)
    out = list(records)
    cache: dict[str, np.ndarray] = {}
    n = len(records)
    for i in range(n, target):
        src = records[(i - n) % n]
        if src.path not in cache:
            cache[src.path] = loader(src.path)
        rec_seed = derive_seed(seed, i)
        img = apply(cache[src.path], sample_params(spec, rec_seed))
        rid = f"aug:{src.label.name}:{seed}:{i:06d}"
        path = out_dir / src.label.name / f"{_safe_name(rid)}.png"
        save_image(path, img)
        out.append(ImageRecord(id=rid, path=str(path), label=src.label, provenance=Provenance.augmented,
                               source_id=src.id, seed=rec_seed))
    return out
