"""Squeeze-and-excitation and CBAM blocks, and their insertion into a backbone."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class SeConfig:
    reduction_ratio: int = 16

    def __post_init__(self):
        if self.reduction_ratio < 1:
            raise ValueError("reduction_ratio must be >= 1")


@dataclass(frozen=True)
class CbamConfig:
    reduction_ratio: int = 16
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.reduction_ratio < 1:
            raise ValueError("reduction_ratio must be >= 1")
        if self.spatial_kernel % 2 != 1:
            raise ValueError("spatial_kernel must be odd")


@dataclass(frozen=True)
class AttentionConfig:
    """Trainer-facing keys: variant, reduction_ratio, sites, spatial_kernel."""
    variant: str = "none"
    reduction_ratio: int = 16
    sites: tuple[str, ...] | None = None
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.variant not in ("none", "se", "cbam"):
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.sites is not None:
            object.__setattr__(self, "sites", tuple(self.sites))

    def block_config(self):
        if self.variant == "se":
            return SeConfig(self.reduction_ratio)
        return CbamConfig(self.reduction_ratio, self.spatial_kernel)


def bottleneck(channels: int, r: int) -> int:
    return max(1, channels // r)


def _check(x):
    if x.dim() != 4 or min(x.shape[1:]) < 1:
        raise ValueError(f"expected a (B, C, H, W) feature map, got shape {tuple(x.shape)}")


def _mlp(v, w1, b1, w2, b2):
    return F.linear(F.relu(F.linear(v, w1, b1)), w2, b2)


def _check_mlp(c, params):
    w1, w2 = params["w1"], params["w2"]
    if w1.shape[1] != c or w2.shape[0] != c or w1.shape[0] != w2.shape[1]:
        raise ValueError(f"MLP parameters {tuple(w1.shape)}/{tuple(w2.shape)} do not fit {c} channels")


def se_block(x, params, cfg: SeConfig | None = None):
    """``x * sigmoid(W2 relu(W1 gap(x) + b1) + b2)`` per channel.

    ``params`` holds ``w1 (C/r, C)``, ``b1``, ``w2 (C, C/r)``, ``b2``.
    """
    _check(x)
    _check_mlp(x.shape[1], params)
    s = torch.sigmoid(_mlp(x.mean(dim=(2, 3)), params["w1"], params["b1"], params["w2"], params["b2"]))
    return x * s[:, :, None, None]


def cbam_channel(x, params, cfg: CbamConfig | None = None):
    _check(x)
    _check_mlp(x.shape[1], params)
    a = _mlp(x.mean(dim=(2, 3)), params["w1"], params["b1"], params["w2"], params["b2"])
    m = _mlp(x.amax(dim=(2, 3)), params["w1"], params["b1"], params["w2"], params["b2"])
    return torch.sigmoid(a + m)


def cbam_spatial(x, params, cfg: CbamConfig | None = None):
    _check(x)
    w = params["conv"]
    if w.dim() != 4 or w.shape[:2] != (1, 2) or w.shape[2] != w.shape[3] or w.shape[2] % 2 != 1:
        raise ValueError(f"spatial conv weight must be (1, 2, k, k) with odd k, got {tuple(w.shape)}")
    pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
    return torch.sigmoid(F.conv2d(pooled, w, padding=w.shape[2] // 2))


def cbam_block(x, params, cfg: CbamConfig | None = None):
    x = x * cbam_channel(x, params, cfg)[:, :, None, None]
    return x * cbam_spatial(x, params, cfg)


class SEBlock(nn.Module):
    def __init__(self, channels: int, cfg: SeConfig = SeConfig()):
        super().__init__()
        hidden = bottleneck(channels, cfg.reduction_ratio)
        self.cfg = cfg
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def params(self):
        return {"w1": self.fc1.weight, "b1": self.fc1.bias, "w2": self.fc2.weight, "b2": self.fc2.bias}

    def forward(self, x):
        return se_block(x, self.params(), self.cfg)


class CBAMBlock(nn.Module):
    def __init__(self, channels: int, cfg: CbamConfig = CbamConfig()):
        super().__init__()
        hidden = bottleneck(channels, cfg.reduction_ratio)
        self.cfg = cfg
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.spatial = nn.Conv2d(2, 1, cfg.spatial_kernel, padding=cfg.spatial_kernel // 2, bias=False)

    def params(self):
        return {"w1": self.fc1.weight, "b1": self.fc1.bias, "w2": self.fc2.weight, "b2": self.fc2.bias,
                "conv": self.spatial.weight}

    def forward(self, x):
        return cbam_block(x, self.params(), self.cfg)


ATTENTION_TYPES = (SEBlock, CBAMBlock)


class Attended(nn.Module):
    """A backbone stage followed by an attention block."""

    def __init__(self, body: nn.Module, attention: nn.Module):
        super().__init__()
        self.body = body
        self.attention = attention

    def forward(self, x):
        return self.attention(self.body(x))


def se_parameter_increment(channels: int, r: int) -> int:
    b = bottleneck(channels, r)
    return 2 * channels * b + b + channels


def _site_channels(model: nn.Module, sites, input_size: int, in_channels: int) -> dict[str, int]:
    shapes = {}
    handles = []
    for s in sites:
        mod = model.get_submodule(s)
        handles.append(mod.register_forward_hook(
            lambda m, i, o, s=s: shapes.__setitem__(s, o.shape[1])))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, in_channels, input_size, input_size))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return shapes


def insert_attention(model: nn.Module, variant: str, points, cfg=None, *, input_size: int | None = None,
                     in_channels: int = 3) -> nn.Module:
    """Interpose an SE or CBAM block after each named site, in place.

    Site channel counts are discovered with one dummy forward pass of size
    ``input_size`` (defaults to ``model.input_size``).
    """
    if variant == "none":
        return model
    if variant not in ("se", "cbam"):
        raise ValueError(f"unknown attention variant {variant!r}")
    points = list(points)
    names = dict(model.named_modules())
    unknown = [p for p in points if p not in names or p == ""]
    if unknown:
        raise ValueError(f"unknown insertion site(s): {', '.join(unknown)}")
    if cfg is None:
        cfg = SeConfig() if variant == "se" else CbamConfig()
    size = input_size or getattr(model, "input_size")
    channels = _site_channels(model, points, size, in_channels)
    for p in points:
        parent_name, _, leaf = p.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        body = getattr(parent, leaf)
        block = SEBlock(channels[p], cfg) if variant == "se" else CBAMBlock(channels[p], cfg)
        setattr(parent, leaf, Attended(body, block))
    return model


def count_attention_blocks(model: nn.Module, kind=ATTENTION_TYPES) -> int:
    return sum(isinstance(m, kind) for m in model.modules())
