"""Byzantine worker behaviors.

Two attacks are time-decoupled functions of the honest gradients collected in
the same round (alie, ipm); the other two run the honest estimator path with
corrupted inputs (bit flip negates the result, label flip negates the labels
of the local objective). Every Byzantine worker in a round sends the same
vector under alie/ipm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .objective import Objective

KINDS = ("none", "bit_flip", "label_flip", "alie", "ipm")

_SHORT = {"none": "none", "bf": "bit_flip", "lf": "label_flip",
          "alie": "alie", "ipm": "ipm"}
_ABBREV = {"none": "none", "bit_flip": "bf", "label_flip": "lf",
           "alie": "alie", "ipm": "ipm"}

ALIE_Z = 1.06
IPM_EPS = 0.1


@dataclass(frozen=True)
class AttackSpec:
    """Which attack Byzantine workers run, with its scalar knobs."""

    kind: str = "none"
    z: float = ALIE_Z
    eps: float = IPM_EPS

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack {self.kind!r}")

    def label(self) -> str:
        s = _ABBREV[self.kind]
        if self.kind == "alie" and self.z != ALIE_Z:
            s += f"{self.z:g}"
        if self.kind == "ipm" and self.eps != IPM_EPS:
            s += f"{self.eps:g}"
        return s

    def to_dict(self) -> dict:
        return {"kind": self.kind, "z": self.z, "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(**d)


def parse_attack(text: str) -> AttackSpec:
    """Parse labels like 'none', 'bf', 'lf', 'alie', 'alie:1.5', 'ipm:0.2'."""
    name, _, param = text.strip().partition(":")
    if name not in _SHORT:
        raise ValueError(f"unknown attack {text!r}")
    kind = _SHORT[name]
    if not param:
        return AttackSpec(kind=kind)
    if kind == "alie":
        return AttackSpec(kind=kind, z=float(param))
    if kind == "ipm":
        return AttackSpec(kind=kind, eps=float(param))
    raise ValueError(f"attack {name!r} takes no parameter")


def bit_flip(g: np.ndarray) -> np.ndarray:
    """Send the negated honestly computed gradient estimate."""
    return -g


def alie(honest_vectors, z: float = ALIE_Z) -> np.ndarray:
    """Per-coordinate mean minus z times the per-coordinate population
    standard deviation of the honest gradients."""
    H = np.asarray(honest_vectors, dtype=np.float64)
    return H.mean(axis=0) - z * H.std(axis=0)


def ipm(honest_vectors, eps: float = IPM_EPS) -> np.ndarray:
    """Negated eps-scaled mean of the honest gradients (inner-product
    manipulation)."""
    H = np.asarray(honest_vectors, dtype=np.float64)
    return -(eps / H.shape[0]) * H.sum(axis=0)


def label_flipped_objective(obj: Objective) -> Objective:
    """The same objective with every label negated; feature caches are
    shared with the source objective."""
    ds = obj.dataset
    flipped = Dataset(ds.rows, -ds.labels, ds.dim, name=f"{ds.name}#lf")
    flipped._csr = ds.feature_matrix()
    out = Objective(flipped, obj.l2, _gram_lambda=obj._gram_lambda)
    out._dense = obj._dense
    return out


def label_flip(worker, flipped_obj: Objective, x: np.ndarray, b: int) -> np.ndarray:
    """Honest estimator evaluated against the label-negated objective,
    including the label-negated reference full gradient."""
    from .engine import lsvrg_estimator

    return lsvrg_estimator(worker, flipped_obj, x, b)
