"""Shared fixtures: a frozen synthetic one-hot dataset plus tiny hand oracles."""

import numpy as np
import pytest

from byzvr import analysis
from byzvr.data import parse_libsvm, subsample
from byzvr.objective import make_logistic

# 22 categorical groups, 112 one-hot columns in total
GROUP_SIZES = [3, 4, 5, 6, 7, 8] * 3 + [3, 3, 3, 4]
SYNTH_SEED = 20240517
SYNTH_FLIP = 0.10
SYNTH_M = 8124


def synth_libsvm_text(m=SYNTH_M, seed=SYNTH_SEED, flip=SYNTH_FLIP):
    """Categorical rows with a planted linear score and a little label noise.

    Each row activates exactly one column per group, mirroring the one-hot
    encodings common for categorical binary classification sets. Labels come
    from thresholding a planted linear score at its median, then flipping a
    small fraction so the problem is not separable.
    """
    assert sum(GROUP_SIZES) == 112
    rng = np.random.default_rng(seed)
    offsets = np.cumsum([0] + GROUP_SIZES[:-1])
    theta = rng.normal(0.0, 1.0, 112)
    cols = np.empty((m, len(GROUP_SIZES)), dtype=np.int64)
    for g, size in enumerate(GROUP_SIZES):
        probs = rng.dirichlet(np.full(size, 2.5))
        cols[:, g] = offsets[g] + rng.choice(size, size=m, p=probs)
    scores = theta[cols].sum(axis=1)
    tau = np.median(scores)
    labels = np.where(scores > tau, 1, -1)
    flips = rng.random(m) < flip
    labels = np.where(flips, -labels, labels)
    seen = np.zeros(112, dtype=bool)
    seen[cols.ravel()] = True
    assert seen.all(), f"unused columns: {np.flatnonzero(~seen)}"
    lines = []
    for i in range(m):
        feats = " ".join(f"{c + 1}:1" for c in sorted(cols[i]))
        lines.append(("+1 " if labels[i] > 0 else "-1 ") + feats)
    return "\n".join(lines) + "\n"


@pytest.fixture(scope="session")
def synth_full():
    return parse_libsvm(synth_libsvm_text(), name="synth")


@pytest.fixture(scope="session")
def synth_ds(synth_full):
    # 1000 rows keeps full-gradient rounds cheap while staying non-trivial
    return subsample(synth_full, 1000, 7)


@pytest.fixture(scope="session")
def synth_obj(synth_ds):
    return make_logistic(synth_ds)


@pytest.fixture(scope="session")
def synth_ref(synth_obj):
    return analysis.solve_reference(synth_obj, tol=1e-12)


class QuadToy:
    """Two scalar quadratics f_1 = x^2, f_2 = (x - 1)^2; everything by hand.

    Implements just enough of the objective protocol for the worker
    estimators: m, dim, full_grad, component_grad_batch.
    """

    m = 2
    dim = 1
    L = 2.0
    mu = 2.0

    def full_loss(self, x):
        v = float(x[0])
        return 0.5 * (v * v + (v - 1.0) ** 2)

    def component_grad_batch(self, idx, x):
        idx = np.asarray(idx, dtype=np.int64)
        targets = np.where(idx == 0, 0.0, 1.0)
        return (2.0 * (float(x[0]) - targets))[:, None]

    def full_grad(self, x, counter=None):
        if counter is not None:
            counter.add(self.m)
        return np.array([2.0 * float(x[0]) - 1.0])


@pytest.fixture
def quad_toy():
    return QuadToy()


class FixedRng:
    """Stand-in rng that returns scripted index batches and uniforms."""

    def __init__(self, batches, uniforms=()):
        self._batches = [np.asarray(b, dtype=np.int64) for b in batches]
        self._uniforms = list(uniforms)

    def integers(self, low, high=None, size=None):
        out = self._batches.pop(0)
        assert size is None or out.shape == (size,)
        return out

    def random(self):
        return self._uniforms.pop(0)
