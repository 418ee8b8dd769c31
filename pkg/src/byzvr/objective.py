"""Regularized logistic regression as a finite sum.

f(x) = (1/m) sum_j f_j(x),   f_j(x) = log(1 + exp(-y_j <a_j, x>)) + (l2/2)||x||^2

Losses use the stable form max(t, 0) + log1p(exp(-|t|)); gradients use a
stable sigmoid. Per-component smoothness is L_j = l2 + ||a_j||^2 / 4 and the
sum is L-smooth with L = l2 + lambda_max(A^T A) / (4 m), estimated by power
iteration. The sum is mu-strongly convex with mu = l2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Dataset


class NumericalError(RuntimeError):
    """An iterative numeric routine failed to reach its tolerance."""


@dataclass
class OracleCounter:
    """Running count of component-gradient evaluations for one worker.

    A full-gradient evaluation is charged as m component calls.
    """

    count: int = 0

    def add(self, k: int) -> None:
        self.count += k


def largest_gram_eigenvalue(dataset: Dataset, tol: float = 1e-6,
                            max_iter: int = 10_000, seed: int = 0) -> float:
    """lambda_max(A^T A) by power iteration with Rayleigh-quotient stopping.

    The start vector is drawn from a fixed-seed generator so the estimate is
    reproducible. Raises NumericalError if the relative change in the
    Rayleigh quotient has not fallen below tol within max_iter iterations.
    """
    A = dataset.feature_matrix()
    d = dataset.dim
    if d == 0 or A.nnz == 0:
        return 0.0
    v = np.random.default_rng(seed).standard_normal(d)
    v /= np.linalg.norm(v)
    lam_prev = np.inf
    for _ in range(max_iter):
        w = A.T @ (A @ v)
        lam = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(lam - lam_prev) <= tol * max(abs(lam), 1e-300):
            return lam
        lam_prev = lam
    raise NumericalError(
        f"power iteration did not converge in {max_iter} iterations "
        f"(last rel change {abs(lam - lam_prev) / max(abs(lam), 1e-300):.3e})")


class Objective:
    """Logistic finite sum bound to one dataset and one l2 strength.

    Per-sample gradients are formed by sparse scatter-add plus the dense l2
    term; batched paths use a dense copy of the feature matrix (datasets here
    are desk scale, d <= a few hundred).
    """

    def __init__(self, dataset: Dataset, l2: float, _gram_lambda: float | None = None):
        if l2 < 0:
            raise ValueError("l2 must be non-negative")
        self.dataset = dataset
        self.l2 = float(l2)
        self.y = dataset.labels
        self._gram_lambda = _gram_lambda
        self._dense: np.ndarray | None = None
        self._row_sq: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.dataset.m

    @property
    def dim(self) -> int:
        return self.dataset.dim

    @property
    def mu(self) -> float:
        return self.l2

    @property
    def dense_rows(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self.dataset.feature_matrix().toarray()
        return self._dense

    @property
    def row_sqnorms(self) -> np.ndarray:
        if self._row_sq is None:
            A = self.dataset.feature_matrix()
            self._row_sq = np.asarray(A.multiply(A).sum(axis=1)).ravel()
        return self._row_sq

    def gram_lambda_max(self) -> float:
        if self._gram_lambda is None:
            self._gram_lambda = largest_gram_eigenvalue(self.dataset)
        return self._gram_lambda

    @property
    def L(self) -> float:
        return self.l2 + self.gram_lambda_max() / (4.0 * self.m)

    @property
    def L_components(self) -> np.ndarray:
        return self.l2 + self.row_sqnorms / 4.0

    # -- losses ------------------------------------------------------------

    def component_loss(self, j: int, x: np.ndarray) -> float:
        r = self.dataset.rows[j]
        t = -self.y[j] * float(r.values @ x[r.indices])
        return float(np.logaddexp(0.0, t) + 0.5 * self.l2 * (x @ x))

    def full_loss(self, x: np.ndarray) -> float:
        t = -self.y * self.margins(x)
        return float(np.mean(np.logaddexp(0.0, t)) + 0.5 * self.l2 * (x @ x))

    # -- gradients ---------------------------------------------------------

    def component_grad(self, j: int, x: np.ndarray,
                       counter: OracleCounter | None = None) -> np.ndarray:
        r = self.dataset.rows[j]
        z = float(r.values @ x[r.indices])
        c = -self.y[j] * float(expit(-self.y[j] * z))
        g = self.l2 * x
        g[r.indices] += c * r.values  # l2*x above is a fresh array; safe in place
        if counter is not None:
            counter.add(1)
        return g

    def component_grad_batch(self, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Stacked component gradients, shape (len(idx), dim). Not counted."""
        R = self.dense_rows[idx]
        c = self.grad_coefs(x, idx)
        return c[:, None] * R + self.l2 * x

    def full_grad(self, x: np.ndarray,
                  counter: OracleCounter | None = None) -> np.ndarray:
        c = self.grad_coefs(x)
        g = (c @ self.dense_rows) / self.m + self.l2 * x
        if counter is not None:
            counter.add(self.m)
        return g

    # -- vectorized helpers ------------------------------------------------

    def margins(self, x: np.ndarray, idx: np.ndarray | None = None) -> np.ndarray:
        """<a_j, x> for all rows (or the given rows)."""
        if idx is None:
            return self.dense_rows @ x
        return self.dense_rows[idx] @ x

    def grad_coefs(self, x: np.ndarray, idx: np.ndarray | None = None) -> np.ndarray:
        """Scalar c_j with grad f_j(x) = c_j a_j + l2 x."""
        y = self.y if idx is None else self.y[idx]
        return -y * expit(-y * self.margins(x, idx))

    def gradient_variance(self, x: np.ndarray) -> float:
        """(1/m) sum_j ||grad f_j(x) - grad f(x)||^2, evaluated exactly."""
        c = self.grad_coefs(x)
        cbar_a = (c @ self.dense_rows) / self.m  # data part of the mean gradient
        # grad f_j - grad f = c_j a_j - cbar_a; the l2 terms cancel
        cross = self.dense_rows @ cbar_a
        return float(np.mean(c * c * self.row_sqnorms - 2.0 * c * cross)
                     + cbar_a @ cbar_a)


def make_logistic(dataset: Dataset, l2: float | None = None,
                  l2_ratio: float = 1e-3) -> Objective:
    """Build the objective; l2=None picks l2 = l2_ratio * L0 in one pass,
    where L0 is the smoothness of the unregularized loss (so the final
    smoothness is L = L0 + l2; the ratio is not iterated to a fixed point)."""
    lam = largest_gram_eigenvalue(dataset)
    if l2 is None:
        l2 = l2_ratio * lam / (4.0 * dataset.m)
    return Objective(dataset, l2, _gram_lambda=lam)


def smoothness_constants(obj: Objective) -> tuple[float, np.ndarray]:
    """(L, per-component L_j) for the bound objective."""
    return obj.L, obj.L_components


@dataclass
class RegularityReport:
    """Randomized check of convexity / smoothness / strong convexity.

    Slacks are lhs-minus-rhs of each inequality, so negative means violated
    beyond tolerance. passed requires every trial within tolerance.
    """

    trials: int
    passed: bool
    min_lower_bound_slack: float
    min_smoothness_slack: float
    min_strong_convexity_slack: float


def check_regularity(obj, trials: int = 200, seed: int = 0,
                     scale: float = 1.0, tol: float = 1e-9) -> RegularityReport:
    """Sample random (x, y, j) and verify, within tol:

    - per-component convexity: f_j(y) >= f_j(x) + <grad f_j(x), y - x>
    - per-component smoothness: ||grad f_j(x) - grad f_j(y)|| <= L_j ||x - y||
    - strong convexity of the sum with mu:
      f(y) >= f(x) + <grad f(x), y - x> + (mu/2) ||y - x||^2

    Works against any objective exposing the component/full loss and
    gradient methods plus L_components and mu.
    """
    rng = np.random.default_rng(seed)
    _, L_js = smoothness_constants(obj)
    min_lb = np.inf
    min_sm = np.inf
    min_sc = np.inf
    for _ in range(trials):
        x = scale * rng.standard_normal(obj.dim)
        y = scale * rng.standard_normal(obj.dim)
        j = int(rng.integers(obj.m))
        gx = obj.component_grad(j, x)
        lb = obj.component_loss(j, y) - obj.component_loss(j, x) - gx @ (y - x)
        min_lb = min(min_lb, float(lb))
        gap = np.linalg.norm(gx - obj.component_grad(j, y))
        sm = L_js[j] * np.linalg.norm(x - y) * (1.0 + tol) - gap
        min_sm = min(min_sm, float(sm))
        sc = (obj.full_loss(y) - obj.full_loss(x) - obj.full_grad(x) @ (y - x)
              - 0.5 * obj.mu * float((y - x) @ (y - x)))
        min_sc = min(min_sc, float(sc))
    passed = min_lb >= -tol and min_sm >= 0.0 and min_sc >= -tol
    return RegularityReport(trials, passed, min_lb, min_sm, min_sc)
