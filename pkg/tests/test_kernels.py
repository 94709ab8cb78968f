"""Checks for the coordinate-descent kernel backends."""

import os
import subprocess
import sys

import numpy as np
import pytest

from dwisparse._kernels import BACKEND, HAVE_COMPILED, get_backend, nn_lasso_batch
from dwisparse._kernels._cd_ref import nn_lasso_batch as ref_batch


def _problem(rng, m, p, n, sparsity=3, noise=0.05):
    atoms = np.abs(rng.normal(size=(m, p)))
    atoms /= np.linalg.norm(atoms, axis=0)
    codes = np.zeros((p, n))
    for j in range(n):
        support = rng.choice(p, size=sparsity, replace=False)
        codes[support, j] = rng.uniform(0.5, 2.0, size=sparsity)
    x = atoms @ codes + noise * rng.normal(size=(m, n))
    gram = np.ascontiguousarray(atoms.T @ atoms)
    corr = np.asfortranarray(atoms.T @ x)
    xsq = np.einsum("ij,ij->j", x, x)
    return atoms, x, gram, corr, xsq


def _solve(fn, gram, corr, xsq, penalty, coefs=None, tol_scale=1e-10, max_sweeps=5000):
    p, n = corr.shape
    if coefs is None:
        coefs = np.asfortranarray(np.zeros((p, n)))
    pen = np.asfortranarray(np.full((p, n), penalty))
    tol = np.full(n, tol_scale * np.sqrt(np.maximum(xsq, 1.0)))
    res, nnz, sweeps = fn(gram, corr, pen, coefs, xsq, tol, max_sweeps)
    return coefs, res, nnz, sweeps


def _objective(x, atoms, coefs, penalty):
    resid = x - atoms @ coefs
    return 0.5 * np.einsum("ij,ij->j", resid, resid) + penalty * coefs.sum(axis=0)


def _kkt_violation(atoms, x, coefs, penalty):
    grad = atoms.T @ (x - atoms @ coefs) - penalty  # ascent direction
    pos = coefs > 0
    v_pos = np.abs(np.where(pos, grad, 0.0)).max() if pos.any() else 0.0
    v_zero = np.maximum(np.where(~pos, grad, -np.inf), 0.0).max()
    return max(v_pos, float(v_zero))


def test_backend_reports_identity():
    name, fn = get_backend("auto")
    assert name in ("compiled", "python")
    assert name == BACKEND
    assert fn is nn_lasso_batch
    with pytest.raises(ValueError):
        get_backend("gpu")


def test_python_backend_always_available():
    name, fn = get_backend("python")
    assert name == "python"
    assert fn is ref_batch


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled extension not built")
def test_backends_agree_on_objective():
    rng = np.random.default_rng(0)
    atoms, x, gram, corr, xsq = _problem(rng, 20, 40, 64)
    _, fast = get_backend("compiled")
    penalty = 0.1
    c_fast, r_fast, nnz_fast, _ = _solve(fast, gram, corr, xsq, penalty)
    c_ref, r_ref, nnz_ref, _ = _solve(ref_batch, gram, corr, xsq, penalty)
    obj_fast = _objective(x, atoms, c_fast, penalty)
    obj_ref = _objective(x, atoms, c_ref, penalty)
    assert np.allclose(obj_fast, obj_ref, rtol=1e-8, atol=1e-10)
    assert np.allclose(r_fast, r_ref, rtol=1e-6, atol=1e-9)
    assert np.array_equal(nnz_fast, nnz_ref)


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled extension not built")
def test_compiled_satisfies_kkt():
    rng = np.random.default_rng(1)
    _, fast = get_backend("compiled")
    for trial in range(20):
        m = int(rng.integers(5, 21))
        p = int(rng.integers(5, 41))
        atoms, x, gram, corr, xsq = _problem(rng, m, p, 16)
        penalty = float(rng.uniform(0.01, 0.5))
        coefs, res, nnz, _ = _solve(fast, gram, corr, xsq, penalty)
        assert _kkt_violation(atoms, x, coefs, penalty) < 1e-6 * max(
            1.0, np.abs(corr).max()
        )
        # reported residual matches the actual one
        actual = np.einsum("ij,ij->j", x - atoms @ coefs, x - atoms @ coefs)
        assert np.allclose(res, actual, rtol=1e-8, atol=1e-9)
        assert np.array_equal(nnz, (coefs > 0).sum(axis=0))


def test_reference_satisfies_kkt():
    rng = np.random.default_rng(2)
    for trial in range(10):
        atoms, x, gram, corr, xsq = _problem(rng, 12, 24, 8)
        penalty = 0.05
        coefs, res, _, _ = _solve(ref_batch, gram, corr, xsq, penalty)
        assert _kkt_violation(atoms, x, coefs, penalty) < 1e-6 * max(
            1.0, np.abs(corr).max()
        )


def test_warm_start_is_idempotent():
    # restarting from the solution may polish within tolerance but must
    # not move the point materially or redo the whole descent
    rng = np.random.default_rng(3)
    atoms, x, gram, corr, xsq = _problem(rng, 16, 32, 32)
    penalty = 0.1
    coefs, res1, _, sweeps1 = _solve(ref_batch, gram, corr, xsq, penalty)
    again = np.asfortranarray(coefs.copy())
    _, res2, _, sweeps2 = _solve(ref_batch, gram, corr, xsq, penalty, coefs=again)
    assert sweeps2 <= max(4, sweeps1 // 2)
    assert np.allclose(again, coefs, rtol=1e-6, atol=1e-9)
    assert np.allclose(res1, res2, rtol=1e-9, atol=1e-12)


def test_zero_penalty_reaches_least_squares():
    # nonnegative data with an orthonormal dictionary: exact recovery
    rng = np.random.default_rng(4)
    p = 16
    atoms = np.eye(p)
    codes = np.abs(rng.normal(size=(p, 8)))
    x = atoms @ codes
    gram = np.ascontiguousarray(atoms.T @ atoms)
    corr = np.asfortranarray(atoms.T @ x)
    xsq = np.einsum("ij,ij->j", x, x)
    coefs, res, _, _ = _solve(ref_batch, gram, corr, xsq, 0.0)
    assert np.allclose(coefs, codes, atol=1e-10)
    assert np.all(res < 1e-10)  # bookkeeping floor, clamped at zero


def test_penalty_shrinks_support():
    rng = np.random.default_rng(5)
    atoms, x, gram, corr, xsq = _problem(rng, 20, 40, 16, noise=0.1)
    _, _, nnz_small, _ = _solve(ref_batch, gram, corr, xsq, 0.01)
    _, _, nnz_large, _ = _solve(ref_batch, gram, corr, xsq, 1.0)
    assert nnz_large.sum() < nnz_small.sum()
    # a penalty above max correlation forces the all-zero solution
    _, _, nnz_huge, _ = _solve(ref_batch, gram, corr, xsq, np.abs(corr).max() * 1.01)
    assert nnz_huge.sum() == 0


def test_dead_atoms_never_activate():
    rng = np.random.default_rng(6)
    atoms, x, gram, corr, xsq = _problem(rng, 10, 20, 8)
    atoms[:, 3] = 0.0  # kill one atom
    gram = np.ascontiguousarray(atoms.T @ atoms)
    corr = np.asfortranarray(atoms.T @ x)
    coefs, _, _, _ = _solve(ref_batch, gram, corr, xsq, 0.05)
    assert np.all(coefs[3] == 0.0)


def test_shape_validation():
    gram = np.zeros((4, 4))
    corr = np.zeros((4, 3))
    with pytest.raises(ValueError):
        ref_batch(gram, corr, np.zeros((4, 2)), np.zeros((4, 3)), np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        ref_batch(gram, corr, np.zeros((4, 3)), np.zeros((4, 3)), np.zeros(2), np.zeros(3))


def test_per_coefficient_penalties_respected():
    # an infinite-like penalty on one atom excludes it from the fit
    rng = np.random.default_rng(7)
    atoms, x, gram, corr, xsq = _problem(rng, 12, 16, 8)
    pen = np.asfortranarray(np.full((16, 8), 0.01))
    pen[5, :] = 1e12
    coefs = np.asfortranarray(np.zeros((16, 8)))
    tol = np.full(8, 1e-10 * np.sqrt(np.maximum(xsq, 1.0)))
    ref_batch(gram, corr, pen, coefs, xsq, tol, 5000)
    assert np.all(coefs[5] == 0.0)


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled extension not built")
def test_env_var_forces_python_backend():
    code = (
        "import dwisparse._kernels as k; "
        "print(k.BACKEND)"
    )
    env = dict(os.environ, DWISPARSE_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", code], capture_output=True, text=True, env=env
    )
    assert out.stdout.strip() == "python"
    env = dict(os.environ, DWISPARSE_PURE_PYTHON="0")
    out = subprocess.run(
        [sys.executable, "-c", code], capture_output=True, text=True, env=env
    )
    assert out.stdout.strip() == "compiled"
