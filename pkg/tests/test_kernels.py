import os
import runpy
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from octfew import kernels
from octfew.augment import SampledParams, inverse_matrix


def _sq(X):
    return ((X[:, None] - X[None]) ** 2).sum(-1)


@pytest.mark.parametrize("params", [SampledParams(), SampledParams(0.05, -0.03, 17.0, 0.12),
                                    SampledParams(-0.05, 0.05, -30.0, 0.2)])
def test_warp_parity(params, rng):
    img = rng.integers(0, 256, (23, 31, 3)).astype(np.float64)
    inv = inverse_matrix(params, 23, 31)
    a = kernels._warp_affine_nb(img, inv)
    b = kernels._warp_affine_np(img, inv)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_warp_identity_and_shift():
    img = np.arange(5 * 6 * 1, dtype=np.float64).reshape(5, 6, 1)
    np.testing.assert_array_equal(kernels.warp_affine(img, np.array([[1.0, 0, 0], [0, 1.0, 0]])), img)
    # sampling one pixel to the right shifts content left and zero-fills the last column
    out = kernels.warp_affine(img, np.array([[1.0, 0, 1], [0, 1.0, 0]]))
    np.testing.assert_array_equal(out[:, :-1], img[:, 1:])
    assert (out[:, -1] == 0).all()
    # half-pixel offset is the mean of neighbours
    out = kernels.warp_affine(img, np.array([[1.0, 0, 0.5], [0, 1.0, 0]]))
    np.testing.assert_allclose(out[:, :-1], (img[:, :-1] + img[:, 1:]) / 2)


def test_affinity_parity_and_calibration(rng):
    X = rng.normal(size=(60, 4))
    d2 = _sq(X)
    Pa, ba, ha = kernels._conditional_p_nb(d2, np.log(12.0), 1e-10, 200)
    Pb, bb, hb = kernels._conditional_p_np(d2, np.log(12.0), 1e-10, 200)
    np.testing.assert_allclose(Pa, Pb, atol=1e-12)
    np.testing.assert_allclose(ba, bb, rtol=1e-12)
    assert np.all(np.abs(np.exp(ha) - 12.0) < 1e-4)
    np.testing.assert_allclose(Pa.sum(1), 1.0)
    assert np.all(np.diag(Pa) == 0)
    # the returned entropy is the entropy of the returned row
    row = Pa[0][Pa[0] > 0]
    assert -np.sum(row * np.log(row)) == pytest.approx(ha[0], abs=1e-9)


def test_gradient_parity_and_finite_difference(rng):
    n = 12
    Y = rng.normal(size=(n, 3))
    P = rng.random((n, n))
    P = P + P.T
    np.fill_diagonal(P, 0)
    P /= P.sum()
    ga, kla = kernels._tsne_grad_nb(Y, P, 1.0)
    gb, klb = kernels._tsne_grad_np(Y, P, 1.0)
    np.testing.assert_allclose(ga, gb, atol=1e-12)
    assert kla == pytest.approx(klb, rel=1e-12)
    eps = 1e-6
    for i, k in [(0, 0), (3, 2), (11, 1)]:
        Yp, Ym = Y.copy(), Y.copy()
        Yp[i, k] += eps
        Ym[i, k] -= eps
        fd = (kernels._tsne_grad_np(Yp, P, 1.0)[1] - kernels._tsne_grad_np(Ym, P, 1.0)[1]) / (2 * eps)
        assert ga[i, k] == pytest.approx(fd, rel=1e-5, abs=1e-8)
    # exaggeration changes the gradient but not the reported KL
    ge, kle = kernels._tsne_grad_nb(Y, P, 12.0)
    assert kle == pytest.approx(kla) and not np.allclose(ge, ga)


def test_env_flag_selects_numpy_backend():
    code = "from octfew import kernels; print(kernels.backend())"
    env = {**os.environ, "OCTFEW_DISABLE_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    env["OCTFEW_DISABLE_NUMBA"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numba"


def test_benchmark_script_runs(capsys):
    bench = runpy.run_path(str(Path(__file__).parents[1] / "benchmarks" / "bench_kernels.py"))
    bench["main"](["--repeat", "1", "--warp-size", "16", "--tsne-n", "40"])
    out = capsys.readouterr().out
    assert "warp_affine 16x16" in out and "tsne gradient N=40" in out
