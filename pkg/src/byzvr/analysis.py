"""Reference solutions, potential-function diagnostics, and complexity bounds.

The potential tracked for the variance-reduced method is

    psi_k = ||x_k - x*||^2 + (weight * gamma^2 / p) * sigma_k^2,
    sigma_k^2 = (1/(G m)) sum_{i in G} sum_j ||grad f_j(w_i) - grad f_j(x*)||^2,

with weight 8 in the standard stepsize regime (cap 1/(12 L)) and 72 in the
strict regime (cap 1/(144 L), which needs a large enough batch to guarantee
linear convergence to the exact solution).
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

POTENTIAL_WEIGHT_STANDARD = 8.0
POTENTIAL_WEIGHT_STRICT = 72.0

METHODS = ("br_lsvrg", "byrd_saga", "byz_vr_marina")


class AnalysisError(RuntimeError):
    """Solver failure; carries the best iterate found so far."""

    def __init__(self, message: str, x_best=None, grad_norm: float | None = None):
        super().__init__(message)
        self.x_best = x_best
        self.grad_norm = grad_norm


@dataclass
class ReferenceSolution:
    """High-accuracy minimizer used to report suboptimality and distances."""

    x_star: np.ndarray
    f_star: float
    grad_norm: float
    solver_tol: float
    iterations: int


def solve_reference(obj, tol: float = 1e-12, max_iter: int = 200_000,
                    x0: np.ndarray | None = None) -> ReferenceSolution:
    """Minimize the full objective to ||grad f(x)|| <= tol.

    Nesterov's accelerated gradient for strongly convex problems with a
    function-value restart; starts from zero. Deterministic. Raises
    AnalysisError (carrying the best iterate) if the cap is hit.
    """
    L, mu = obj.L, obj.mu
    if mu <= 0.0:
        raise AnalysisError("reference solver requires mu > 0")
    beta = (math.sqrt(L) - math.sqrt(mu)) / (math.sqrt(L) + math.sqrt(mu))
    x = np.zeros(obj.dim) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    y = x.copy()
    f_prev = obj.full_loss(x)
    best_x, best_norm = x.copy(), math.inf
    iterations = 0
    for it in range(1, max_iter + 1):
        iterations = it
        g = obj.full_grad(y)
        x_new = y - g / L
        y = x_new + beta * (x_new - x)
        x = x_new
        if it % 10 == 0 or float(g @ g) <= tol * tol:
            gx = obj.full_grad(x)
            nx = float(np.linalg.norm(gx))
            if nx < best_norm:
                best_norm, best_x = nx, x.copy()
            if nx <= tol:
                return ReferenceSolution(x, obj.full_loss(x), nx, tol, it)
            f_now = obj.full_loss(x)
            if f_now > f_prev:  # restart momentum on increase
                y = x.copy()
            f_prev = f_now
    raise AnalysisError(
        f"reference solver hit max_iter={max_iter} with ||grad||={best_norm:.3e}",
        x_best=best_x, grad_norm=best_norm)


def component_gap_mean(obj, w: np.ndarray, x_star: np.ndarray,
                       star_coefs: np.ndarray | None = None) -> float:
    """(1/m) sum_j ||grad f_j(w) - grad f_j(x*)||^2, vectorized.

    grad f_j(w) - grad f_j(x*) = (c_w_j - c*_j) a_j + l2 (w - x*), so the
    squared norms need only margins and cached row norms.
    """
    cw = obj.grad_coefs(w)
    cs = obj.grad_coefs(x_star) if star_coefs is None else star_coefs
    dc = cw - cs
    r = obj.l2 * (w - x_star)
    Ar = obj.margins(r)
    return float(np.mean(dc * dc * obj.row_sqnorms + 2.0 * dc * Ar) + r @ r)


def lyapunov(obj, x: np.ndarray, reference_points, gamma: float, p: float,
             x_star: np.ndarray, weight: float = POTENTIAL_WEIGHT_STANDARD,
             star_coefs: np.ndarray | None = None) -> tuple[float, float]:
    """(psi, sigma_k^2) for the current iterate and honest reference points."""
    refs = list(reference_points)
    if not refs:
        raise ValueError("need at least one reference point")
    if star_coefs is None:
        star_coefs = obj.grad_coefs(x_star)
    sigma2 = float(np.mean([component_gap_mean(obj, w, x_star, star_coefs)
                            for w in refs]))
    diff = x - x_star
    psi = float(diff @ diff) + weight * gamma * gamma / p * sigma2
    return psi, sigma2


def neighborhood_size(gamma: float, b: int, mu: float, c: float,
                      delta: float, sigma2: float) -> float:
    """Size of the convergence neighborhood in the standard regime:
    gamma*32*c*delta*sigma^2/(b*mu) + 32*c*delta*sigma^2/(b*mu^2)."""
    if mu <= 0.0 or b < 1:
        raise ValueError("need mu > 0 and b >= 1")
    core = 32.0 * c * delta * sigma2 / b
    return gamma * core / mu + core / (mu * mu)


@dataclass
class ComplexityReport:
    """Iteration and per-worker oracle complexity with all constants set
    to 1 inside the big-O."""

    method: str
    iterations: float
    oracle_calls: float


def complexity_bounds(method: str, L: float, mu: float, m: int, n: int,
                      b: int, c: float, delta: float, eps: float) -> ComplexityReport:
    """Evaluate the published iteration/oracle complexity formulas.

    delta >= 1/2 is outside every method's domain and raises ValueError.
    The br_lsvrg formulas assume the strict parameter regime (p = b/m,
    gamma = min{1/(144 L), b/(m mu)}); they are evaluated with the inputs
    as given.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must be in (0, 1)")
    if not 0.0 < mu <= L:
        raise ValueError("need 0 < mu <= L")
    if delta >= 0.5:
        raise ValueError("delta >= 1/2 defeats every aggregator (majority lost)")
    if delta < 0.0 or c < 0.0 or m < 1 or n < 1 or not 1 <= b:
        raise ValueError("bad domain")
    log_term = math.log(1.0 / eps)
    kappa = L / mu
    if method == "br_lsvrg":
        iters = (kappa + m / b) * log_term
        oracle = (kappa + L * L * math.sqrt(c * delta) / (mu * mu)
                  + L * math.sqrt(c * delta * m) / mu + m) * log_term
    elif method == "byrd_saga":
        core = m * m * L * L / ((1.0 - 2.0 * delta) * mu * mu)
        iters = core / (b * b) * log_term
        oracle = core / b * log_term
    else:
        iters = (kappa + L * math.sqrt(m) / (mu * b * math.sqrt(n))
                 + L * m * math.sqrt(c * delta) / (mu * math.sqrt(b ** 3))
                 + m / b) * log_term
        oracle = (b * kappa + L * math.sqrt(m) / (mu * math.sqrt(n))
                  + L * m * math.sqrt(c * delta) / (mu * math.sqrt(b))
                  + m) * log_term
    return ComplexityReport(method, iters, oracle)


# -- reference cache ----------------------------------------------------------


def reference_cache_path(cache_dir: str, fingerprint: str, l2: float,
                         tol: float) -> str:
    return os.path.join(cache_dir, f"ref_{fingerprint}_l2{l2!r}_tol{tol!r}.json")


def save_reference(path: str, ref: ReferenceSolution) -> None:
    """Atomic write (temp file + rename) so concurrent writers are safe."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    payload = {"x_star": ref.x_star.tolist(), "f_star": ref.f_star,
               "grad_norm": ref.grad_norm, "solver_tol": ref.solver_tol,
               "iterations": ref.iterations}
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_reference(path: str) -> ReferenceSolution:
    with open(path) as fh:
        d = json.load(fh)
    return ReferenceSolution(np.asarray(d["x_star"], dtype=np.float64),
                             d["f_star"], d["grad_norm"], d["solver_tol"],
                             d["iterations"])


def cached_reference(obj, cache_dir: str, fingerprint: str,
                     tol: float = 1e-12) -> ReferenceSolution:
    """Load the reference solution for (fingerprint, l2, tol) or solve and
    store it."""
    path = reference_cache_path(cache_dir, fingerprint, obj.l2, tol)
    if os.path.exists(path):
        return load_reference(path)
    ref = solve_reference(obj, tol=tol)
    save_reference(path, ref)
    return ref
