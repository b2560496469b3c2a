"""Adaptive layer-instance normalisation and CAM channel attention."""
from __future__ import annotations

from dataclasses import dataclass

import torch

EPS = 1e-5


def instance_norm(x, eps: float = EPS):
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


def layer_norm(x, eps: float = EPS):
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    var = x.var(dim=(1, 2, 3), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


def _per_channel(t, x, name):
    """Broadcast a (C,), (B, C) or (B|1, C, 1, 1) tensor against x of shape (B, C, H, W)."""
    t = torch.as_tensor(t, dtype=x.dtype)
    if t.dim() == 0:
        return t
    if t.dim() == 1:
        t = t[None, :, None, None]
    elif t.dim() == 2:
        t = t[:, :, None, None]
    if t.dim() != 4 or t.shape[1] != x.shape[1] or t.shape[0] not in (1, x.shape[0]):
        raise ValueError(f"{name} shape {tuple(t.shape)} does not conform to input {tuple(x.shape)}")
    return t


def adalin(x, gamma, beta, rho, eps: float = EPS):
    """``gamma * (rho * IN(x) + (1 - rho) * LN(x)) + beta`` on a (B, C, H, W) tensor."""
    if x.dim() != 4:
        raise ValueError(f"adalin expects (B, C, H, W), got {tuple(x.shape)}")
    rho = _per_channel(rho, x, "rho")
    gamma = _per_channel(gamma, x, "gamma")
    beta = _per_channel(beta, x, "beta")
    mixed = rho * instance_norm(x, eps) + (1 - rho) * layer_norm(x, eps)
    return mixed * gamma + beta


@dataclass
class CamOutput:
    weighted_features: torch.Tensor
    logit: torch.Tensor
    attention_map: torch.Tensor


def cam_attention(features, weights, pool: str = "avg") -> CamOutput:
    """Reweight channels by an auxiliary linear classifier's weights.

    ``features`` is (C, H, W) or (B, C, H, W); ``weights`` has length C.  The
    logit is the classifier score on globally pooled features; the map is the
    unnormalised sum of weighted channels.
    """
    squeeze = features.dim() == 3
    f = features[None] if squeeze else features
    w = weights.reshape(-1)
    if w.numel() != f.shape[1]:
        raise ValueError(f"CAM weight length {w.numel()} != channel count {f.shape[1]}")
    pooled = f.mean(dim=(2, 3)) if pool == "avg" else f.amax(dim=(2, 3))
    logit = pooled @ w
    weighted = f * w[None, :, None, None]
    amap = weighted.sum(dim=1)
    if squeeze:
        return CamOutput(weighted[0], logit[0], amap[0])
    return CamOutput(weighted, logit, amap)
