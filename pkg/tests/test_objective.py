"""Loss/gradient correctness against high-precision and finite-difference oracles."""

import mpmath as mp
import numpy as np
import pytest
from scipy.linalg import eigh

from byzvr.data import Dataset, SparseRow, parse_libsvm
from byzvr.objective import (
    NumericalError,
    Objective,
    OracleCounter,
    check_regularity,
    largest_gram_eigenvalue,
    make_logistic,
    smoothness_constants,
)


def dense_dataset(m, dim, seed, name="dense"):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, dim))
    y = np.where(rng.random(m) > 0.5, 1.0, -1.0)
    rows = [SparseRow(np.arange(dim), A[i].copy()) for i in range(m)]
    return Dataset(rows, y, dim, name), A, y


def mp_full_loss(A, y, x, l2):
    """50-digit reference for mean logistic loss plus ridge term."""
    mp.mp.dps = 50
    tot = mp.mpf(0)
    for i in range(len(y)):
        t = mp.mpf(0)
        for a, v in zip(A[i], x):
            t += mp.mpf(float(a)) * mp.mpf(float(v))
        tot += mp.log(1 + mp.e ** (-mp.mpf(float(y[i])) * t))
    tot /= len(y)
    tot += mp.mpf(float(l2)) / 2 * sum(mp.mpf(float(v)) ** 2 for v in x)
    return float(tot)


def test_full_loss_against_mpmath():
    ds, A, y = dense_dataset(6, 4, seed=2)
    obj = Objective(ds, l2=0.05)
    rng = np.random.default_rng(9)
    for scale in (0.3, 3.0, 40.0):  # 40 pushes margins deep into saturation
        x = scale * rng.standard_normal(4)
        want = mp_full_loss(A, y, x, 0.05)
        got = obj.full_loss(x)
        assert got == pytest.approx(want, rel=1e-12)


def test_component_loss_sums_to_full_loss():
    ds, A, y = dense_dataset(7, 3, seed=4)
    obj = Objective(ds, l2=0.01)
    x = np.random.default_rng(1).standard_normal(3)
    mean = np.mean([obj.component_loss(j, x) for j in range(7)])
    assert mean == pytest.approx(obj.full_loss(x), rel=1e-14)


def test_gradients_against_central_differences():
    ds, A, y = dense_dataset(5, 6, seed=7)
    obj = Objective(ds, l2=0.02)
    x = np.random.default_rng(5).standard_normal(6)
    h = 1e-6
    for j in range(5):
        g = obj.component_grad(j, x)
        fd = np.empty(6)
        for t in range(6):
            e = np.zeros(6)
            e[t] = h
            fd[t] = (obj.component_loss(j, x + e) - obj.component_loss(j, x - e)) / (
                2 * h
            )
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)
    gfull = obj.full_grad(x)
    fd = np.empty(6)
    for t in range(6):
        e = np.zeros(6)
        e[t] = h
        fd[t] = (obj.full_loss(x + e) - obj.full_loss(x - e)) / (2 * h)
    np.testing.assert_allclose(gfull, fd, rtol=1e-6, atol=1e-8)


def test_batch_grad_matches_single_and_mean():
    ds, _, _ = dense_dataset(9, 4, seed=3)
    obj = Objective(ds, l2=0.1)
    x = np.random.default_rng(2).standard_normal(4)
    idx = np.array([4, 0, 4, 7])
    B = obj.component_grad_batch(idx, x)
    assert B.shape == (4, 4)
    for r, j in enumerate(idx):
        np.testing.assert_allclose(B[r], obj.component_grad(int(j), x), rtol=1e-14)
    full_idx = np.arange(9)
    np.testing.assert_allclose(
        obj.component_grad_batch(full_idx, x).mean(axis=0),
        obj.full_grad(x),
        rtol=1e-12,
    )


def test_power_iteration_against_dense_eigensolver():
    ds, A, _ = dense_dataset(20, 5, seed=11)
    lam = largest_gram_eigenvalue(ds, tol=1e-10)
    want = eigh(A.T @ A, eigvals_only=True)[-1]
    assert lam == pytest.approx(want, rel=1e-5)


def test_power_iteration_edge_cases():
    empty = Dataset(
        [SparseRow(np.array([], dtype=np.int64), np.array([]))], np.array([1.0]), 3, ""
    )
    assert largest_gram_eigenvalue(empty) == 0.0
    ds, _, _ = dense_dataset(20, 5, seed=11)
    with pytest.raises(NumericalError):
        largest_gram_eigenvalue(ds, tol=1e-16, max_iter=2)


def test_smoothness_constants_hand_values():
    rows = [
        SparseRow(np.array([0, 1]), np.array([3.0, 4.0])),  # norm^2 = 25
        SparseRow(np.array([2]), np.array([2.0])),  # norm^2 = 4
    ]
    ds = Dataset(rows, np.array([1.0, -1.0]), 3, "hand")
    obj = Objective(ds, l2=0.5)
    L, L_js = smoothness_constants(obj)
    np.testing.assert_allclose(L_js, [0.5 + 25 / 4, 0.5 + 4 / 4])
    lam = eigh(ds.feature_matrix().toarray().T @ ds.feature_matrix().toarray(),
               eigvals_only=True)[-1]
    assert L == pytest.approx(0.5 + lam / (4 * 2), rel=1e-6)
    assert obj.mu == 0.5
    # mean smoothness never exceeds the worst component
    assert L <= L_js.max() + 1e-12


def test_make_logistic_default_ridge():
    ds, A, _ = dense_dataset(30, 4, seed=13)
    lam = eigh(A.T @ A, eigvals_only=True)[-1]
    obj = make_logistic(ds)
    # one-pass rule: ridge is 1e-3 of the unregularized smoothness
    assert obj.l2 == pytest.approx(1e-3 * lam / (4 * 30), rel=1e-5)
    assert obj.L == pytest.approx(obj.l2 + lam / (4 * 30), rel=1e-5)
    explicit = make_logistic(ds, l2=0.25)
    assert explicit.l2 == 0.25


def test_oracle_counter_semantics():
    ds, _, _ = dense_dataset(8, 3, seed=1)
    obj = Objective(ds, l2=0.1)
    x = np.zeros(3)
    ctr = OracleCounter()
    obj.component_grad(2, x, ctr)
    assert ctr.count == 1
    obj.full_grad(x, ctr)
    assert ctr.count == 1 + 8
    obj.component_grad(2, x)  # no counter, not charged
    obj.component_grad_batch(np.array([0, 1]), x)  # callers charge batches
    assert ctr.count == 9


def test_gradient_variance_matches_brute_force():
    ds, _, _ = dense_dataset(12, 5, seed=21)
    obj = Objective(ds, l2=0.05)
    x = np.random.default_rng(3).standard_normal(5)
    gfull = obj.full_grad(x)
    brute = np.mean(
        [
            float(np.sum((obj.component_grad(j, x) - gfull) ** 2))
            for j in range(12)
        ]
    )
    assert obj.gradient_variance(x) == pytest.approx(brute, rel=1e-10)


def test_grad_coefs_formula():
    ds, A, y = dense_dataset(6, 3, seed=8)
    obj = Objective(ds, l2=0.0)
    x = np.random.default_rng(4).standard_normal(3)
    c = obj.grad_coefs(x)
    margins = A @ x
    want = -y / (1.0 + np.exp(y * margins))
    np.testing.assert_allclose(c, want, rtol=1e-12)


def test_check_regularity_passes_on_clean_objective():
    ds, _, _ = dense_dataset(15, 4, seed=6)
    obj = Objective(ds, l2=0.01)
    rep = check_regularity(obj, trials=150, seed=0)
    assert rep.passed
    assert rep.trials == 150
    assert rep.min_lower_bound_slack >= -1e-9
    assert rep.min_smoothness_slack >= 0.0
    assert rep.min_strong_convexity_slack >= -1e-9


class _BrokenGradient:
    """Wrapper whose component gradients are scaled, breaking convexity."""

    def __init__(self, obj, factor=1.25):
        self._obj = obj
        self._factor = factor

    def __getattr__(self, name):
        return getattr(self._obj, name)

    @property
    def L_components(self):
        return self._obj.L_components

    @property
    def mu(self):
        return self._obj.mu

    @property
    def dim(self):
        return self._obj.dim

    @property
    def m(self):
        return self._obj.m

    def component_grad(self, j, x, counter=None):
        return self._factor * self._obj.component_grad(j, x, counter)


def test_check_regularity_flags_corrupted_gradients():
    ds, _, _ = dense_dataset(15, 4, seed=6)
    obj = Objective(ds, l2=0.01)
    rep = check_regularity(_BrokenGradient(obj), trials=150, seed=0)
    assert not rep.passed


def test_sparse_and_dense_paths_agree(synth_ds):
    obj = make_logistic(synth_ds)
    x = np.random.default_rng(17).standard_normal(obj.dim)
    j = 123
    np.testing.assert_allclose(
        obj.component_grad(j, x),
        obj.component_grad_batch(np.array([j]), x)[0],
        rtol=1e-13,
    )
    row = synth_ds.rows[j]
    t = -synth_ds.labels[j] * float(row.values @ x[row.indices])
    want = float(np.logaddexp(0.0, t) + 0.5 * obj.l2 * (x @ x))
    assert obj.component_loss(j, x) == pytest.approx(want, rel=1e-14)
