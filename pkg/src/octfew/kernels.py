"""Hot numeric kernels: bilinear affine warp and exact t-SNE inner loops.

Every kernel exists twice: a numba ``@njit`` loop version and a vectorised
numpy version.  The numba path is used by default; set ``OCTFEW_DISABLE_NUMBA=1``
to force the numpy path (also used automatically when numba is missing).
Both paths are importable directly (``*_nb`` / ``*_np``) for parity tests
and benchmarks.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("OCTFEW_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def _njit(fn):
    if numba is None:  # pragma: no cover
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# bilinear affine warp
# ---------------------------------------------------------------------------

def _warp_affine_np(image, inv):
    h, w, c = image.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    sy = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros((h, w, c), dtype=np.float64)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy = y0 + oy
        xx = x0 + ox
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) & (wgt != 0)
        vals = np.zeros((h, w, c), dtype=np.float64)
        vals[valid] = image[yy[valid], xx[valid]]
        out += wgt[..., None] * vals
    return out


@_njit
def _warp_affine_nb(image, inv):
    h, w, c = image.shape
    out = np.zeros((h, w, c), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            sx = inv[0, 0] * x + inv[0, 1] * y + inv[0, 2]
            sy = inv[1, 0] * x + inv[1, 1] * y + inv[1, 2]
            x0 = np.floor(sx)
            y0 = np.floor(sy)
            fx = sx - x0
            fy = sy - y0
            ix = int(x0)
            iy = int(y0)
            for oy in range(2):
                wy = fy if oy == 1 else 1.0 - fy
                yy = iy + oy
                if yy < 0 or yy >= h or wy == 0.0:
                    continue
                for ox in range(2):
                    wx = fx if ox == 1 else 1.0 - fx
                    xx = ix + ox
                    if xx < 0 or xx >= w or wx == 0.0:
                        continue
                    wgt = wy * wx
                    for ch in range(c):
                        out[y, x, ch] += wgt * image[yy, xx, ch]
    return out


def warp_affine(image: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Resample ``image`` (H, W, C) at ``inv @ [x, y, 1]`` for every output pixel.

    Out-of-frame samples contribute zero.  Returns float64.
    """
    image = np.ascontiguousarray(image, dtype=np.float64)
    inv = np.ascontiguousarray(inv, dtype=np.float64)
    if USE_NUMBA:
        return _warp_affine_nb(image, inv)
    return _warp_affine_np(image, inv)


# ---------------------------------------------------------------------------
# t-SNE: conditional affinities by bandwidth bisection
# ---------------------------------------------------------------------------

def _row_entropy_np(d2_row, beta):
    # shift by the row minimum for stability; cancels in the normalisation
    shifted = d2_row - d2_row.min()
    p = np.exp(-shifted * beta)
    s = p.sum()
    h = np.log(s) + beta * np.sum(shifted * p) / s
    return h, p / s


def _conditional_p_np(d2, log_perp, tol, max_iter):
    n = d2.shape[0]
    P = np.zeros((n, n))
    betas = np.ones(n)
    entropies = np.zeros(n)
    for i in range(n):
        row = np.delete(d2[i], i)
        beta, lo, hi = 1.0, -np.inf, np.inf
        h, p = _row_entropy_np(row, beta)
        for _ in range(max_iter):
            diff = h - log_perp
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = beta / 2.0 if lo == -np.inf else (beta + lo) / 2.0
            h, p = _row_entropy_np(row, beta)
        P[i, np.arange(n) != i] = p
        betas[i] = beta
        entropies[i] = h
    return P, betas, entropies


@_njit
def _conditional_p_nb(d2, log_perp, tol, max_iter):
    n = d2.shape[0]
    P = np.zeros((n, n))
    betas = np.ones(n)
    entropies = np.zeros(n)
    p = np.zeros(n)
    for i in range(n):
        dmin = np.inf
        for j in range(n):
            if j != i and d2[i, j] < dmin:
                dmin = d2[i, j]
        beta = 1.0
        lo = -np.inf
        hi = np.inf
        h = 0.0
        for it in range(max_iter + 1):
            s = 0.0
            sdp = 0.0
            for j in range(n):
                if j == i:
                    p[j] = 0.0
                    continue
                sh = d2[i, j] - dmin
                v = np.exp(-sh * beta)
                p[j] = v
                s += v
                sdp += sh * v
            h = np.log(s) + beta * sdp / s
            for j in range(n):
                p[j] /= s
            if it == max_iter:
                break
            diff = h - log_perp
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                if hi == np.inf:
                    beta *= 2.0
                else:
                    beta = (beta + hi) / 2.0
            else:
                hi = beta
                if lo == -np.inf:
                    beta /= 2.0
                else:
                    beta = (beta + lo) / 2.0
        for j in range(n):
            P[i, j] = p[j]
        betas[i] = beta
        entropies[i] = h
    return P, betas, entropies


def conditional_affinities(d2: np.ndarray, perplexity: float, tol: float = 1e-10, max_iter: int = 200):
    """Row-stochastic Gaussian affinities whose entropy matches ``log(perplexity)``.

    Returns ``(P_conditional, betas, entropies)`` with natural-log entropies.
    """
    d2 = np.ascontiguousarray(d2, dtype=np.float64)
    fn = _conditional_p_nb if USE_NUMBA else _conditional_p_np
    return fn(d2, float(np.log(perplexity)), float(tol), int(max_iter))


# ---------------------------------------------------------------------------
# t-SNE: KL gradient
# ---------------------------------------------------------------------------

def _tsne_grad_np(Y, P, exaggeration):
    diff = Y[:, None, :] - Y[None, :, :]
    num = 1.0 / (1.0 + np.sum(diff * diff, axis=2))
    np.fill_diagonal(num, 0.0)
    Q = num / num.sum()
    W = (exaggeration * P - Q) * num
    grad = 4.0 * np.einsum("ij,ijk->ik", W, diff)
    mask = P > 0
    kl = float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))
    return grad, kl


@_njit
def _tsne_grad_nb(Y, P, exaggeration):
    n, d = Y.shape
    num = np.zeros((n, n))
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for k in range(d):
                t = Y[i, k] - Y[j, k]
                s += t * t
            v = 1.0 / (1.0 + s)
            num[i, j] = v
            num[j, i] = v
            total += 2.0 * v
    grad = np.zeros((n, d))
    kl = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            q = num[i, j] / total
            pij = P[i, j]
            if pij > 0.0:
                kl += pij * np.log(pij / max(q, 1e-300))
            w = (exaggeration * pij - q) * num[i, j]
            for k in range(d):
                grad[i, k] += 4.0 * w * (Y[i, k] - Y[j, k])
    return grad, kl


def tsne_gradient(Y: np.ndarray, P: np.ndarray, exaggeration: float = 1.0):
    """Gradient of KL(P*exaggeration || Q) w.r.t. ``Y`` plus KL(P || Q).

    The returned KL always uses the un-exaggerated ``P``.
    """
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    P = np.ascontiguousarray(P, dtype=np.float64)
    if USE_NUMBA:
        return _tsne_grad_nb(Y, P, float(exaggeration))
    return _tsne_grad_np(Y, P, float(exaggeration))


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
