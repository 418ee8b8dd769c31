"""Round-based simulation of Byzantine-robust distributed optimization.

One server, n workers, synchronous rounds. Honest workers compute either a
loopless-SVRG estimator (per-round reference switch with probability p, full
gradient recomputed lazily on next use) or a SAGA estimator (per-component
gradient table plus running mean). Byzantine workers send whatever their
attack dictates. The server aggregates in worker-id order and takes one step.

Determinism: every worker owns an RNG stream derived from
(master_seed, worker tag, worker_id); the bucketing permutation of round k
uses (master_seed, bucket tag, k). Identical config and seed give an
identical trace.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .aggregation import AggregatorSpec, aggregate, with_krum_count
from .attacks import AttackSpec, alie, bit_flip, ipm, label_flipped_objective
from .objective import NumericalError, Objective, OracleCounter

_WORKER_TAG = 0x77726b72  # "wrkr"
_BUCKET_TAG = 0x6275636b  # "buck"

SAGA_MEAN_DRIFT_TOL = 1e-9


class ConfigError(ValueError):
    """Rejected run configuration; raised before round 0."""


def worker_rng(master_seed: int, worker_id: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((master_seed, _WORKER_TAG, worker_id)))


def bucket_rng(master_seed: int, k: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((master_seed, _BUCKET_TAG, k)))


class WorkerState:
    """Mutable per-worker state: RNG stream, oracle counter, and either the
    SVRG reference point (w, cached full gradient, staleness flag) or the
    SAGA table with its running mean."""

    def __init__(self, worker_id: int, rng: np.random.Generator,
                 byzantine: bool = False):
        self.id = worker_id
        self.rng = rng
        self.byzantine = byzantine
        self.oracle = OracleCounter()
        self.w: np.ndarray | None = None
        self.grad_at_w: np.ndarray | None = None
        self.stale = False
        self.saga_table: np.ndarray | None = None
        self.saga_mean: np.ndarray | None = None

    def init_reference(self, obj: Objective, x0: np.ndarray) -> None:
        self.w = x0.copy()
        self.grad_at_w = obj.full_grad(x0, self.oracle)
        self.stale = False

    def init_saga_table(self, obj: Objective, x0: np.ndarray) -> None:
        self.saga_table = obj.component_grad_batch(np.arange(obj.m), x0)
        self.saga_mean = self.saga_table.mean(axis=0)
        self.oracle.add(obj.m)


def lsvrg_estimator(worker: WorkerState, obj: Objective, x: np.ndarray,
                    b: int) -> np.ndarray:
    """Draw b indices iid uniform (with replacement) from the worker's
    stream and return

        (1/b) sum_t [grad f_{j_t}(x) - grad f_{j_t}(w)] + grad f(w).

    The cached full gradient is recomputed here if the reference switched
    last round (m calls); the estimator itself always counts 2b calls, even
    when w == x and the difference cancels exactly.
    """
    if worker.stale:
        worker.grad_at_w = obj.full_grad(worker.w, worker.oracle)
        worker.stale = False
    idx = worker.rng.integers(0, obj.m, size=b)
    gx = obj.component_grad_batch(idx, x)
    gw = obj.component_grad_batch(idx, worker.w)
    worker.oracle.add(2 * b)
    return (gx - gw).mean(axis=0) + worker.grad_at_w


def maybe_switch_reference(worker: WorkerState, x: np.ndarray, p: float) -> bool:
    """With probability p, move the reference to the current broadcast point.
    The full gradient at the new reference is charged on next use."""
    if worker.rng.random() < p:
        worker.w = x.copy()
        worker.stale = True
        return True
    return False


def saga_estimator(worker: WorkerState, obj: Objective, x: np.ndarray,
                   b: int) -> np.ndarray:
    """SAGA estimate (1/b) sum_t [grad f_{j_t}(x) - table_{j_t}] + mean(table),
    reading pre-batch table entries, then overwriting the drawn entries
    sequentially in draw order. Counts b fresh component gradients."""
    idx = worker.rng.integers(0, obj.m, size=b)
    g_new = obj.component_grad_batch(idx, x)
    g_old = worker.saga_table[idx]
    est = (g_new - g_old).mean(axis=0) + worker.saga_mean
    inv_m = 1.0 / obj.m
    for t in range(b):
        j = idx[t]
        delta = g_new[t] - worker.saga_table[j]
        worker.saga_table[j] = g_new[t]
        worker.saga_mean += delta * inv_m
    worker.oracle.add(b)
    return est


def theoretical_stepsize(obj: Objective, p: float, regime: str = "standard") -> float:
    """min(cap/L, p/mu): cap is 1/12 in the standard regime, 1/144 in the
    strict one (the strict cap pairs with the batch bound b >= c*delta/(gamma*mu))."""
    caps = {"standard": 12.0, "strict": 144.0}
    if regime not in caps:
        raise ValueError(f"unknown regime {regime!r}")
    cap = 1.0 / (caps[regime] * obj.L)
    if obj.mu <= 0.0:
        return cap
    return min(cap, p / obj.mu)


@dataclass
class RunConfig:
    """Everything one run depends on besides the objective itself."""

    gamma: float
    b: int
    K: int
    master_seed: int
    n: int = 16
    method: str = "br_lsvrg"
    p: float | None = None  # None resolves to b/m; ignored by byrd_saga
    byzantine_ids: tuple[int, ...] = ()
    aggregator: AggregatorSpec = AggregatorSpec("mean")
    attack: AttackSpec = AttackSpec("none")
    eval_every: int = 1000

    def resolved_p(self, m: int) -> float:
        return self.b / m if self.p is None else self.p

    def validate(self, m: int) -> None:
        if self.method not in ("br_lsvrg", "byrd_saga"):
            raise ConfigError(f"unknown method {self.method!r}")
        if not self.gamma > 0.0:
            raise ConfigError("gamma must be positive")
        if not 1 <= self.b <= m:
            raise ConfigError(f"b must be in [1, {m}], got {self.b}")
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        ids = tuple(self.byzantine_ids)
        if len(set(ids)) != len(ids):
            raise ConfigError("byzantine_ids contains duplicates")
        if any(not 0 <= i < self.n for i in ids):
            raise ConfigError("byzantine_ids out of range")
        if len(ids) >= self.n:
            raise ConfigError("need at least one honest worker")
        p = self.resolved_p(m)
        if self.method == "br_lsvrg" and not 0.0 < p <= 1.0:
            raise ConfigError(f"p must be in (0, 1], got {p}")
        if len(ids) * 2 >= self.n:
            warnings.warn(
                f"{len(ids)}/{self.n} Byzantine workers: no aggregator can "
                "guarantee anything at or above 50%", stacklevel=2)


@dataclass
class TraceRecord:
    k: int
    subopt: float
    dist2: float
    sigma_k2: float
    psi_k: float
    oracle_calls: int
    elapsed_s: float


@dataclass
class RunTrace:
    """Evaluation records plus run outcome.

    The CSV form carries only the deterministic columns (wall time stays in
    memory and in run metadata) so reruns with one seed are byte-identical.
    """

    records: list[TraceRecord] = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""
    x_final: np.ndarray | None = None
    diagnostic_calls: int = 0
    elapsed_s: float = 0.0

    CSV_HEADER = "k,subopt,dist2,sigma_k2,psi_k,oracle_calls"

    @property
    def final_subopt(self) -> float:
        if self.aborted or not self.records:
            return float("inf")
        return self.records[-1].subopt

    def csv_text(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.records:
            lines.append(f"{r.k},{r.subopt!r},{r.dist2!r},{r.sigma_k2!r},"
                         f"{r.psi_k!r},{r.oracle_calls}")
        return "\n".join(lines) + "\n"

    def to_csv(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.csv_text())


def _check_saga_drift(workers: list[WorkerState]) -> None:
    for w in workers:
        if w.saga_table is None:
            continue
        drift = float(np.max(np.abs(w.saga_table.mean(axis=0) - w.saga_mean)))
        if drift > SAGA_MEAN_DRIFT_TOL:
            raise NumericalError(f"saga running mean drifted by {drift:.3e}")


def run(obj: Objective, config: RunConfig, ref: analysis.ReferenceSolution,
        x0: np.ndarray | None = None) -> RunTrace:
    """Simulate one run and return its trace.

    Rounds are strict barriers: all honest estimates are computed before the
    attack sees them, vectors are aggregated in worker-id order, then the
    server steps. A non-finite iterate aborts the run with a diagnostic
    record. Potential diagnostics are charged to a separate counter so the
    oracle-call column reflects algorithm work only.
    """
    m = obj.m
    config.validate(m)
    t0 = time.perf_counter()

    byz = frozenset(config.byzantine_ids)
    honest_ids = [i for i in range(config.n) if i not in byz]
    byz_ids = sorted(byz)
    p = config.resolved_p(m)
    agg_spec = with_krum_count(config.aggregator, len(byz_ids))
    kind = config.attack.kind
    saga = config.method == "byrd_saga"
    estimator = saga_estimator if saga else lsvrg_estimator

    x = np.zeros(obj.dim) if x0 is None else np.asarray(x0, dtype=np.float64).copy()

    # Byzantine workers running bf/lf/none follow the honest protocol on
    # their own objective; alie/ipm workers need no local state at all.
    flipped = label_flipped_objective(obj) if kind == "label_flip" else None
    workers = [WorkerState(i, worker_rng(config.master_seed, i), i in byz)
               for i in range(config.n)]
    byz_obj = flipped if kind == "label_flip" else obj
    simulating = dict.fromkeys(honest_ids, obj)
    if kind in ("bit_flip", "label_flip", "none"):
        simulating.update(dict.fromkeys(byz_ids, byz_obj))
    for i, local_obj in simulating.items():
        if saga:
            workers[i].init_saga_table(local_obj, x)
        else:
            workers[i].init_reference(local_obj, x)

    honest_workers = [workers[i] for i in honest_ids]
    star_coefs = obj.grad_coefs(ref.x_star)
    trace = RunTrace()

    def record(k: int) -> None:
        with np.errstate(all="ignore"):
            subopt = obj.full_loss(x) - ref.f_star
            diff = x - ref.x_star
            dist2 = float(diff @ diff)
            if saga:
                sigma2, psi = float("nan"), float("nan")
            else:
                psi, sigma2 = analysis.lyapunov(
                    obj, x, [w.w for w in honest_workers], config.gamma, p,
                    ref.x_star, star_coefs=star_coefs)
                trace.diagnostic_calls += len(honest_workers) * m
        oracle = sum(w.oracle.count for w in honest_workers)
        trace.records.append(TraceRecord(k, subopt, dist2, sigma2, psi, oracle,
                                         time.perf_counter() - t0))
        if saga:
            _check_saga_drift(honest_workers)

    record(0)
    vectors: list[np.ndarray | None] = [None] * config.n
    for k in range(config.K):
        for i in honest_ids:
            w = workers[i]
            vectors[i] = estimator(w, obj, x, config.b)
            if not saga:
                maybe_switch_reference(w, x, p)
        if byz_ids:
            if kind in ("bit_flip", "label_flip", "none"):
                for i in byz_ids:
                    w = workers[i]
                    g = estimator(w, byz_obj, x, config.b)
                    if not saga:
                        maybe_switch_reference(w, x, p)
                    vectors[i] = bit_flip(g) if kind == "bit_flip" else g
            else:
                honest_gs = [vectors[i] for i in honest_ids]
                v = (alie(honest_gs, config.attack.z) if kind == "alie"
                     else ipm(honest_gs, config.attack.eps))
                for i in byz_ids:
                    vectors[i] = v
        brng = (bucket_rng(config.master_seed, k)
                if agg_spec.bucket_size is not None else None)
        with np.errstate(over="ignore", invalid="ignore"):
            x = x - config.gamma * aggregate(agg_spec, vectors, rng=brng)
        if not np.all(np.isfinite(x)):
            trace.aborted = True
            trace.abort_reason = f"non-finite iterate after round {k + 1}"
            record(k + 1)
            break
        if (k + 1) % config.eval_every == 0 or k + 1 == config.K:
            record(k + 1)

    trace.x_final = x
    trace.elapsed_s = time.perf_counter() - t0
    return trace
