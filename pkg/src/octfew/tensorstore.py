"""Directory checkpoint format shared by GAN and classifier models.

Layout::

    <dir>/header.json          # user header + {"tensors": {name: {"file", "shape"}}}
    <dir>/tensors/t00000.bin   # little-endian float32, C order, one per tensor
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = "1.0"


def save_tensors(directory, tensors: Mapping[str, np.ndarray], header: Mapping | None = None) -> None:
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    index = {}
    for i, name in enumerate(sorted(tensors)):
        arr = np.asarray(tensors[name], dtype="<f4")  # tobytes() is C order; keeps 0-d shapes
        fname = f"tensors/t{i:05d}.bin"
        (directory / fname).write_bytes(arr.tobytes())
        index[name] = {"file": fname, "shape": list(arr.shape)}
    doc = dict(header or {})
    doc["format_version"] = FORMAT_VERSION
    doc["tensors"] = index
    (directory / "header.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_tensors(directory) -> tuple[dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    header_path = directory / "header.json"
    if not header_path.is_file():
        raise FileNotFoundError(f"{directory} has no header.json")
    header = json.loads(header_path.read_text())
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"tensor store version {header.get('format_version')!r} != {FORMAT_VERSION!r}")
    tensors = {}
    for name, meta in header.pop("tensors").items():
        raw = (directory / meta["file"]).read_bytes()
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(meta["shape"]).copy()
    return header, tensors


def state_dict_to_numpy(state) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in state.items()}


def numpy_to_state_dict(arrays: Mapping[str, np.ndarray], reference) -> dict:
    """Cast arrays back to the dtypes of a reference torch state dict."""
    import torch

    out = {}
    for k, ref in reference.items():
        if k in arrays:
            out[k] = torch.from_numpy(np.asarray(arrays[k])).to(ref.dtype).reshape(ref.shape)
    return out
