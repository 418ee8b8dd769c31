"""Robust aggregation rules for worker gradient vectors.

Every rule maps n vectors to one vector. Bucketing is an optional outer
stage: a seeded random permutation splits the inputs into buckets of size s,
and the base rule runs on the bucket means. All rules are deterministic
given their inputs (and the rng, when bucketing is on).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

BASES = ("mean", "geometric_median", "coordinate_median", "krum")

_SHORT = {"mean": "mean", "gm": "geometric_median", "cm": "coordinate_median",
          "krum": "krum"}
_ABBREV = {"mean": "mean", "geometric_median": "gm", "coordinate_median": "cm",
           "krum": "krum"}


@dataclass(frozen=True)
class AggregatorSpec:
    """Configuration of one aggregation rule.

    bucket_size=None disables bucketing. krum_byzantine_count is the B used
    in Krum's score (callers usually fill it with the simulated count).
    """

    base: str
    bucket_size: int | None = None
    krum_byzantine_count: int | None = None
    weiszfeld_tol: float = 1e-10
    weiszfeld_max_iter: int = 1000

    def __post_init__(self):
        if self.base not in BASES:
            raise ValueError(f"unknown base aggregator {self.base!r}")
        if self.bucket_size is not None and self.bucket_size < 1:
            raise ValueError("bucket_size must be >= 1")

    def label(self) -> str:
        s = _ABBREV[self.base]
        if self.bucket_size is not None:
            s += f"+b{self.bucket_size}"
        return s

    def to_dict(self) -> dict:
        return {"base": self.base, "bucket_size": self.bucket_size,
                "krum_byzantine_count": self.krum_byzantine_count,
                "weiszfeld_tol": self.weiszfeld_tol,
                "weiszfeld_max_iter": self.weiszfeld_max_iter}

    @classmethod
    def from_dict(cls, d: dict) -> "AggregatorSpec":
        return cls(**d)


def parse_aggregator(text: str) -> AggregatorSpec:
    """Parse compact labels like 'mean', 'gm', 'cm+b4', 'krum+b1'."""
    name, _, tail = text.strip().partition("+")
    base = _SHORT.get(name, name)
    bucket = None
    if tail:
        if not tail.startswith("b") or not tail[1:].isdigit():
            raise ValueError(f"bad aggregator spec {text!r}")
        bucket = int(tail[1:])
    return AggregatorSpec(base=base, bucket_size=bucket)


def default_bucket_size(base: str, delta: float) -> int:
    """Largest admissible bucket size floor(delta_max / delta), floored at 1.

    delta_max is 1/4 for krum and 1/2 for the other bases.
    """
    dmax = 0.25 if base == "krum" else 0.5
    if delta <= 0.0:
        return 1
    return max(1, math.floor(dmax / delta))


# -- base rules --------------------------------------------------------------


def mean(vectors) -> np.ndarray:
    return np.asarray(vectors, dtype=np.float64).mean(axis=0)


def coordinate_median(vectors) -> np.ndarray:
    """Per-coordinate median; even counts take the midpoint of the two
    middle values."""
    return np.median(np.asarray(vectors, dtype=np.float64), axis=0)


def weiszfeld(points: np.ndarray, tol: float = 1e-10,
              max_iter: int = 1000) -> tuple[np.ndarray, int, bool]:
    """Geometric median by Weiszfeld iteration.

    Starts at the mean; each step reweights points by 1/max(dist, 1e-12)
    and moves to the weighted mean, which never increases the objective
    sum_i ||x - x_i||. Stops when the step norm is at most tol. Returns
    (point, iterations, converged); converged is False only when the
    iteration cap was hit.
    """
    P = np.asarray(points, dtype=np.float64)
    x = P.mean(axis=0)
    for it in range(1, max_iter + 1):
        dist = np.linalg.norm(P - x, axis=1)
        w = 1.0 / np.maximum(dist, 1e-12)
        x_new = (w @ P) / w.sum()
        step = np.linalg.norm(x_new - x)
        x = x_new
        if step <= tol:
            return x, it, True
    return x, max_iter, False


def geometric_median(vectors, tol: float = 1e-10, max_iter: int = 1000) -> np.ndarray:
    point, _, _ = weiszfeld(vectors, tol=tol, max_iter=max_iter)
    return point


def krum(vectors, byzantine_count: int) -> np.ndarray:
    """Krum selection: return the input whose summed squared distance to its
    n - B - 2 nearest other inputs is smallest (ties: lowest index).

    Requires n >= B + 3 so that each score covers at least one neighbor.
    """
    X = np.asarray(vectors, dtype=np.float64)
    n = X.shape[0]
    B = int(byzantine_count)
    if B < 0:
        raise ValueError("byzantine_count must be >= 0")
    if n < B + 3:
        raise ValueError(f"krum needs n >= B + 3, got n={n}, B={B}")
    sq = np.einsum("ij,ij->i", X, X)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(D, 0.0)
    np.maximum(D, 0.0, out=D)
    D_sorted = np.sort(D, axis=1)
    # column 0 is the self distance; keep the n - B - 2 nearest neighbors
    scores = D_sorted[:, 1:n - B - 1].sum(axis=1)
    return X[int(np.argmin(scores))].copy()


# -- bucketing and dispatch ---------------------------------------------------


def bucket_means(vectors, s: int, rng: np.random.Generator) -> np.ndarray:
    """Randomly permute the inputs and average consecutive groups of s.

    Produces ceil(n/s) vectors; a short trailing bucket is averaged over its
    actual size.
    """
    X = np.asarray(vectors, dtype=np.float64)
    n = X.shape[0]
    perm = rng.permutation(n)
    out = []
    for start in range(0, n, s):
        out.append(X[perm[start:start + s]].mean(axis=0))
    return np.asarray(out)


def aggregate(spec: AggregatorSpec, vectors,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply spec to the vectors; rng is required when bucketing is on."""
    X = np.asarray(vectors, dtype=np.float64)
    if spec.bucket_size is not None:
        if rng is None:
            raise ValueError("bucketing requires an rng for the permutation")
        X = bucket_means(X, spec.bucket_size, rng)
    if spec.base == "mean":
        return X.mean(axis=0)
    if spec.base == "coordinate_median":
        return coordinate_median(X)
    if spec.base == "geometric_median":
        return geometric_median(X, tol=spec.weiszfeld_tol,
                                max_iter=spec.weiszfeld_max_iter)
    if spec.krum_byzantine_count is None:
        raise ValueError("krum requires krum_byzantine_count")
    return krum(X, spec.krum_byzantine_count)


def with_krum_count(spec: AggregatorSpec, byzantine_count: int) -> AggregatorSpec:
    """Fill in the Krum count if the spec needs one and has none."""
    if spec.base == "krum" and spec.krum_byzantine_count is None:
        return replace(spec, krum_byzantine_count=byzantine_count)
    return spec


# -- empirical robustness audit ----------------------------------------------


@dataclass
class RobustnessAudit:
    """One measurement of aggregation error against honest spread.

    measured_sigma2 is the pairwise honest variance
    (1/(G(G-1))) sum_{i,l} ||x_i - x_l||^2, measured_err2 is
    ||agg(all) - mean(honest)||^2, and implied_c = err2 / (delta * sigma2).
    """

    measured_sigma2: float
    measured_err2: float
    implied_c: float


def pairwise_variance(honest) -> float:
    X = np.asarray(honest, dtype=np.float64)
    G = X.shape[0]
    if G < 2:
        return 0.0
    total = 2.0 * G * float(np.einsum("ij,ij->", X, X)) \
        - 2.0 * float(X.sum(axis=0) @ X.sum(axis=0))
    return total / (G * (G - 1))


def audit_robustness(spec: AggregatorSpec, honest, all_vectors, delta: float,
                     rng: np.random.Generator | None = None) -> RobustnessAudit:
    sigma2 = pairwise_variance(honest)
    out = aggregate(spec, all_vectors, rng=rng)
    hmean = np.asarray(honest, dtype=np.float64).mean(axis=0)
    err2 = float(np.sum((out - hmean) ** 2))
    denom = delta * sigma2
    implied_c = err2 / denom if denom > 0.0 else math.inf
    return RobustnessAudit(sigma2, err2, implied_c)


def monte_carlo_audit(spec: AggregatorSpec, n_honest: int = 13, n_byz: int = 3,
                      dim: int = 10, scale: float = 1e6, delta: float = 3 / 16,
                      n_seeds: int = 200, master_seed: int = 0) -> dict:
    """Repeat audit_robustness over seeded trials: honest vectors are iid
    standard normal, Byzantine vectors sit at scale * ones. Returns summary
    statistics of the implied robustness constant."""
    cs, errs, sigmas = [], [], []
    for trial in range(n_seeds):
        rng = np.random.default_rng((master_seed, 7, trial))
        honest = rng.standard_normal((n_honest, dim))
        byz = np.full((n_byz, dim), scale)
        allv = np.vstack([honest, byz])
        audit = audit_robustness(spec, honest, allv, delta, rng=rng)
        cs.append(audit.implied_c)
        errs.append(audit.measured_err2)
        sigmas.append(audit.measured_sigma2)
    return {"aggregator": spec.label(), "delta": delta, "n_seeds": n_seeds,
            "mean_implied_c": float(np.mean(cs)),
            "max_implied_c": float(np.max(cs)),
            "mean_err2": float(np.mean(errs)),
            "mean_sigma2": float(np.mean(sigmas))}
