"""Checks for dictionary learning and residual-bounded encoding."""

import itertools
import math

import numpy as np
import pytest
from scipy import optimize

from dwisparse import (
    Dictionary,
    PenaltyRule,
    encode_bounded,
    load_dictionary,
    nn_lasso,
    save_dictionary,
    train_dictionary,
)


def _random_dictionary(rng, m, p):
    atoms = np.abs(rng.normal(size=(m, p)))
    atoms /= np.linalg.norm(atoms, axis=0)
    return Dictionary(atoms, penalty=0.0)


def _kkt_holds(x, dictionary, penalty, weights, coefs, tol_scale=1e-6):
    atoms = dictionary.atoms
    grad = atoms.T @ (x - atoms @ coefs.ravel()) - penalty * weights
    tol = tol_scale * max(np.linalg.norm(x), 1e-30)
    pos = coefs.ravel() > 0
    ok_pos = np.all(np.abs(grad[pos]) <= tol) if pos.any() else True
    ok_zero = np.all(grad[~pos] <= tol) if (~pos).any() else True
    return ok_pos and ok_zero


# penalized solver contract


def test_nn_lasso_recovers_single_atom():
    rng = np.random.default_rng(0)
    d = _random_dictionary(rng, 12, 20)
    x = d.atoms[:, 7]
    code = nn_lasso(x, d, penalty=1e-6)
    coefs = code.coefficients.ravel()
    assert coefs[7] == pytest.approx(1.0, abs=1e-4)
    others = np.delete(coefs, 7)
    # coherent atoms may catch crumbs, nothing material
    assert others.max() < 0.05


def test_nn_lasso_null_solution_threshold():
    rng = np.random.default_rng(1)
    d = _random_dictionary(rng, 10, 15)
    x = np.abs(rng.normal(size=10))
    threshold = float((x @ d.atoms).max())
    code = nn_lasso(x, d, penalty=threshold * 1.0001)
    assert code.nnz[0] == 0
    assert np.all(code.coefficients == 0.0)
    assert code.residual_sq[0] == pytest.approx(float(x @ x), rel=1e-12)


def test_nn_lasso_kkt_certificate():
    rng = np.random.default_rng(2)
    for _ in range(50):
        m = int(rng.integers(5, 21))
        p = int(rng.integers(5, 41))
        d = _random_dictionary(rng, m, p)
        x = np.abs(rng.normal(size=m))
        penalty = float(rng.uniform(0.01, 0.5))
        weights = rng.uniform(0.5, 2.0, size=p)
        code = nn_lasso(x, d, penalty, weights=weights)
        assert _kkt_holds(x, d, penalty, weights, code.coefficients)


def test_nn_lasso_scale_equivariance():
    rng = np.random.default_rng(3)
    d = _random_dictionary(rng, 10, 16)
    x = np.abs(rng.normal(size=10))
    c = 7.5
    a1 = nn_lasso(x, d, 0.05).coefficients
    a2 = nn_lasso(c * x, d, c * 0.05).coefficients
    assert np.allclose(c * a1, a2, rtol=1e-6, atol=1e-9)


def test_nn_lasso_matches_brute_force_small():
    # exhaustive nonnegative least squares over supports of size <= 3
    rng = np.random.default_rng(4)
    m, p = 5, 8
    for _ in range(25):
        d = _random_dictionary(rng, m, p)
        x = np.abs(rng.normal(size=m))
        penalty = float(rng.uniform(0.05, 0.3))
        code = nn_lasso(x, d, penalty)
        obj = 0.5 * code.residual_sq[0] + penalty * code.coefficients.sum()

        best = 0.5 * float(x @ x)  # empty support
        for k in (1, 2, 3):
            for support in itertools.combinations(range(p), k):
                sub = d.atoms[:, support]

                def f(a):
                    r = x - sub @ a
                    return 0.5 * float(r @ r) + penalty * float(a.sum())

                res = optimize.minimize(
                    f,
                    np.full(k, 0.1),
                    bounds=[(0, None)] * k,
                    method="L-BFGS-B",
                    options={"ftol": 1e-14, "gtol": 1e-10},
                )
                best = min(best, float(res.fun))
        assert obj <= best + 1e-6


def test_nn_lasso_input_validation():
    rng = np.random.default_rng(5)
    d = _random_dictionary(rng, 8, 12)
    with pytest.raises(ValueError):
        nn_lasso(np.ones(7), d, 0.1)
    with pytest.raises(ValueError):
        nn_lasso(np.ones(8), d, -0.1)
    with pytest.raises(ValueError):
        nn_lasso(np.ones(8), d, 0.1, weights=np.zeros(12))


# dictionary learning


def test_train_objective_never_increases():
    rng = np.random.default_rng(6)
    data = np.abs(rng.normal(size=(16, 300)))
    d = train_dictionary(data, n_atoms=24, epochs=40, seed=0)
    hist = np.asarray(d.objective_history)
    assert hist.size == 40
    assert np.all(np.diff(hist) <= 1e-10)


def test_train_zero_epochs_returns_initialization():
    rng = np.random.default_rng(7)
    data = np.abs(rng.normal(size=(12, 100)))
    d0 = train_dictionary(data, n_atoms=16, epochs=0, seed=3)
    assert d0.objective_history == []
    # initialization is normalized data columns: every atom appears in
    # the normalized training set
    norm_cols = data / np.linalg.norm(data, axis=0)
    for k in range(16):
        dists = np.linalg.norm(norm_cols - d0.atoms[:, [k]], axis=0)
        assert dists.min() < 1e-12


def test_train_atoms_satisfy_constraints():
    rng = np.random.default_rng(8)
    data = np.abs(rng.normal(size=(16, 400)))
    d = train_dictionary(data, n_atoms=32, epochs=15, seed=0)
    assert np.all(d.atoms >= 0.0)
    assert np.all(np.linalg.norm(d.atoms, axis=0) <= 1.0 + 1e-9)


def test_train_recovers_planted_orthogonal_atoms():
    # disjoint-support atoms are mutually orthogonal, so each learned
    # atom should lock onto exactly one of them
    rng = np.random.default_rng(7)
    m, p = 64, 16
    truth = np.zeros((m, p))
    rows = rng.permutation(m)
    for k in range(p):
        truth[rows[4 * k : 4 * k + 4], k] = rng.random(4) + 0.5
    truth /= np.linalg.norm(truth, axis=0)
    n = 4000
    codes = np.zeros((p, n))
    for j in range(n):
        sup = rng.choice(p, size=3, replace=False)
        codes[sup, j] = rng.random(3) * 4 + 1
    data = np.maximum(truth @ codes + 0.01 * rng.normal(size=(m, n)), 0.0)
    d = train_dictionary(data, n_atoms=p, epochs=80, seed=3)
    cosines = np.abs(truth.T @ d.atoms)  # (p_true, p_learned)
    best = cosines.max(axis=1)
    worst_angle = math.degrees(math.acos(min(best.min(), 1.0)))
    assert worst_angle < 5.0


def test_train_deterministic_given_seed():
    rng = np.random.default_rng(10)
    data = np.abs(rng.normal(size=(10, 150)))
    d1 = train_dictionary(data, n_atoms=12, epochs=10, seed=5)
    d2 = train_dictionary(data, n_atoms=12, epochs=10, seed=5)
    assert np.array_equal(d1.atoms, d2.atoms)
    d3 = train_dictionary(data, n_atoms=12, epochs=10, seed=6)
    assert not np.array_equal(d1.atoms, d3.atoms)


def test_train_rejects_empty_training_set():
    with pytest.raises(ValueError):
        train_dictionary(np.zeros((10, 0)), n_atoms=4, epochs=1)


def test_train_duplicates_scarce_columns():
    # fewer columns than atoms: sampling with jitter fills the gap
    rng = np.random.default_rng(11)
    data = np.abs(rng.normal(size=(8, 5)))
    d = train_dictionary(data, n_atoms=12, epochs=3, seed=0)
    assert d.atoms.shape == (8, 12)
    assert np.all(np.isfinite(d.atoms))


# residual-bounded encoding


def _encode_fixture(rng, m=20, p=30, n=60, sigma=0.05):
    d = _random_dictionary(rng, m, p)
    codes = np.zeros((p, n))
    for j in range(n):
        support = rng.choice(p, size=4, replace=False)
        codes[support, j] = rng.uniform(0.5, 2.0, size=4)
    clean = d.atoms @ codes
    data = clean + sigma * rng.normal(size=(m, n))
    return d, np.abs(data), sigma


def test_encode_respects_residual_window():
    rng = np.random.default_rng(12)
    d, data, sigma = _encode_fixture(rng)
    m = data.shape[0]
    rule = PenaltyRule()
    bound = rule.residual_bound(sigma**2, m)
    code = encode_bounded(d, data, sigma**2)
    half = 0.5 * code.residual_sq
    feas = code.feasible
    assert np.all(half[feas] <= bound * (1 + 1e-6))
    nontrivial = feas & (code.nnz > 0)
    assert np.all(half[nontrivial] >= 0.95 * bound * (1 - 1e-6))
    assert code.n_outer <= 40


def test_encode_zero_code_for_quiet_columns():
    rng = np.random.default_rng(13)
    d = _random_dictionary(rng, 10, 14)
    sigma = 1.0
    rule = PenaltyRule()
    bound = float(rule.residual_bound(sigma**2, 10))
    quiet = np.full((10, 3), math.sqrt(2 * bound / 10) * 0.9)  # 0.5||x||^2 < bound
    code = encode_bounded(d, quiet, sigma**2)
    assert np.all(code.nnz == 0)
    assert np.all(code.coefficients == 0.0)
    assert np.allclose(0.5 * code.residual_sq, 0.5 * np.sum(quiet**2, axis=0))


def test_encode_residual_bookkeeping_is_exact():
    rng = np.random.default_rng(14)
    d, data, sigma = _encode_fixture(rng, n=40)
    code = encode_bounded(d, data, sigma**2)
    recon = d.atoms @ code.coefficients
    actual = np.einsum("ij,ij->j", data - recon, data - recon)
    assert np.allclose(actual, code.residual_sq, rtol=1e-6, atol=1e-9)


def test_encode_tiny_bound_reproduces_spanned_data():
    # data exactly in the nonnegative span: the bound can be pushed down
    rng = np.random.default_rng(15)
    d = _random_dictionary(rng, 12, 18)
    codes = np.zeros((18, 10))
    for j in range(10):
        s = rng.choice(18, size=3, replace=False)
        codes[s, j] = rng.uniform(0.5, 1.5, size=3)
    data = d.atoms @ codes
    sigma = 1e-5
    code = encode_bounded(d, data, sigma**2)
    recon = d.atoms @ code.coefficients
    err = np.linalg.norm(recon - data, axis=0) / np.linalg.norm(data, axis=0)
    assert np.all(err[code.feasible] < 1e-3)
    assert code.feasible.mean() > 0.8


def test_encode_flags_unreachable_bounds():
    # a one-atom dictionary cannot reach a tiny bound on generic data
    rng = np.random.default_rng(16)
    atom = np.abs(rng.normal(size=(10, 1)))
    atom /= np.linalg.norm(atom)
    d = Dictionary(atom, penalty=0.0)
    data = np.abs(rng.normal(size=(10, 5))) + 0.5
    sigma = 1e-4
    rule = PenaltyRule()
    bound = float(rule.residual_bound(sigma**2, 10))
    code = encode_bounded(d, data, sigma**2)
    assert not np.any(code.feasible)
    # the flagged columns sit at their nonnegative least squares floor
    for j in range(5):
        a_ref, r_ref = optimize.nnls(d.atoms, data[:, j])
        assert 0.5 * r_ref**2 > bound  # truly unreachable
        assert code.coefficients[0, j] == pytest.approx(a_ref[0], rel=1e-4, abs=1e-8)


def test_encode_seed_changes_epsilon_only_reproducibly():
    rng = np.random.default_rng(17)
    d, data, sigma = _encode_fixture(rng, n=20)
    a = encode_bounded(d, data, sigma**2, seed=1)
    b = encode_bounded(d, data, sigma**2, seed=1)
    assert np.array_equal(a.coefficients, b.coefficients)
    assert np.array_equal(a.epsilon, b.epsilon)
    c = encode_bounded(d, data, sigma**2, seed=2)
    assert not np.array_equal(a.epsilon, c.epsilon)


def test_encode_per_column_sigma():
    rng = np.random.default_rng(18)
    d, data, sigma = _encode_fixture(rng, n=30)
    sig_vec = np.full(30, sigma**2)
    sig_vec[:10] *= 1e4  # first columns get a huge bound: zero codes
    code = encode_bounded(d, data, sig_vec)
    assert np.all(code.nnz[:10] == 0)
    assert code.nnz[10:].sum() > 0


def test_encode_input_validation():
    rng = np.random.default_rng(19)
    d = _random_dictionary(rng, 8, 10)
    with pytest.raises(ValueError):
        encode_bounded(d, np.ones((7, 3)), 1.0)
    with pytest.raises(ValueError):
        encode_bounded(d, np.ones(8), 1.0)  # not 2D
    with pytest.raises(ValueError):
        encode_bounded(d, np.ones((8, 3)), -1.0)


# persistence


def test_dictionary_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(20)
    data = np.abs(rng.normal(size=(10, 120)))
    d = train_dictionary(data, n_atoms=14, epochs=5, seed=9)
    path = str(tmp_path / "atoms.nii")
    save_dictionary(d, path)
    back = load_dictionary(path)
    assert np.array_equal(back.atoms, d.atoms)
    assert back.penalty == d.penalty
    assert back.seed == d.seed


def test_dictionary_load_rejects_mismatched_sidecar(tmp_path):
    rng = np.random.default_rng(21)
    data = np.abs(rng.normal(size=(10, 60)))
    d = train_dictionary(data, n_atoms=8, epochs=2, seed=0)
    path = str(tmp_path / "atoms.nii")
    save_dictionary(d, path)
    side = path[:-4] + ".dict.txt"
    import pathlib

    candidates = list(pathlib.Path(tmp_path).glob("*"))
    txt = [p for p in candidates if p.suffix == ".txt"][0]
    content = txt.read_text().replace("n_atoms=8", "n_atoms=9")
    txt.write_text(content)
    with pytest.raises(ValueError):
        load_dictionary(path)


# penalty rule values


def test_penalty_rule_values():
    rule = PenaltyRule()
    assert rule.training_penalty(162) == pytest.approx(1.2 / math.sqrt(162), rel=1e-12)
    m = 162
    assert rule.residual_bound(4.0, m) == pytest.approx(
        4.0 * (m + 3 * math.sqrt(2 * m)), rel=1e-12
    )
    bounds = rule.residual_bound(np.array([1.0, 2.0]), 10)
    assert bounds.shape == (2,)
    with pytest.raises(ValueError):
        rule.training_penalty(0)
    with pytest.raises(ValueError):
        rule.residual_bound(-1.0, 10)


def test_dictionary_validation():
    with pytest.raises(ValueError):
        Dictionary(np.full((4, 4), -1.0), penalty=0.0)
    with pytest.raises(ValueError):
        Dictionary(np.full((4, 4), 2.0), penalty=0.0)  # norms above 1
    with pytest.raises(ValueError):
        Dictionary(np.ones(4), penalty=0.0)  # not 2D
