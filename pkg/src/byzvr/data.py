"""LIBSVM-format data loading and deterministic subsampling.

Rows are kept sparse (sorted index/value pairs); labels are normalized to
{-1, +1}. Feature indices are 1-based on disk and 0-based in memory.
No feature scaling is applied anywhere in this package.
"""

from __future__ import annotations

import gzip
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np


class ParseError(ValueError):
    """Malformed LIBSVM input; the message names the offending line."""


@dataclass
class SparseRow:
    """One example: strictly increasing 0-based indices and their values."""

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise ValueError("indices and values must be 1-d arrays of equal length")
        if self.indices.size and np.any(np.diff(self.indices) <= 0):
            raise ValueError("indices must be strictly increasing")
        if self.indices.size and self.indices[0] < 0:
            raise ValueError("indices must be non-negative")


@dataclass
class Dataset:
    """A labeled sparse dataset with a fixed feature dimension."""

    rows: list[SparseRow]
    labels: np.ndarray
    dim: int
    name: str = ""
    _csr: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if len(self.rows) != self.labels.shape[0]:
            raise ValueError("row/label count mismatch")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        for r in self.rows:
            if r.indices.size and r.indices[-1] >= self.dim:
                raise ValueError("feature index exceeds dim")

    @property
    def m(self) -> int:
        return len(self.rows)

    def feature_matrix(self):
        """CSR matrix of shape (m, dim); built once and cached."""
        if self._csr is None:
            from scipy.sparse import csr_matrix

            indptr = np.zeros(self.m + 1, dtype=np.int64)
            for i, r in enumerate(self.rows):
                indptr[i + 1] = indptr[i] + r.indices.size
            if self.rows:
                idx = np.concatenate([r.indices for r in self.rows])
                val = np.concatenate([r.values for r in self.rows])
            else:
                idx = np.zeros(0, dtype=np.int64)
                val = np.zeros(0, dtype=np.float64)
            self._csr = csr_matrix((val, idx, indptr), shape=(self.m, self.dim))
        return self._csr


def _parse_line(line: str, lineno: int) -> tuple[float, np.ndarray, np.ndarray]:
    tokens = line.split()
    try:
        raw = float(tokens[0])
    except ValueError:
        raise ParseError(f"line {lineno}: label {tokens[0]!r} is not numeric") from None
    if raw not in (-1.0, 0.0, 1.0):
        raise ParseError(f"line {lineno}: label {raw!r} not in {{-1, 0, +1}}")
    label = -1.0 if raw == 0.0 else raw

    idx = np.empty(len(tokens) - 1, dtype=np.int64)
    val = np.empty(len(tokens) - 1, dtype=np.float64)
    for t, tok in enumerate(tokens[1:]):
        head, sep, tail = tok.partition(":")
        if not sep:
            raise ParseError(f"line {lineno}: feature {tok!r} lacks ':'")
        try:
            i = int(head)
            v = float(tail)
        except ValueError:
            raise ParseError(f"line {lineno}: bad feature token {tok!r}") from None
        if i < 1:
            raise ParseError(f"line {lineno}: index {i} is not 1-based positive")
        idx[t] = i - 1
        val[t] = v
    if idx.size and np.any(np.diff(idx) <= 0):
        raise ParseError(f"line {lineno}: indices not strictly increasing")
    return label, idx, val


def parse_libsvm(text: str, dim: int | None = None, name: str = "") -> Dataset:
    """Parse LIBSVM text into a Dataset.

    Labels may be {-1, +1} or {0, 1} (0 maps to -1). dim defaults to the
    largest observed index + 1; pass it explicitly when trailing features
    may be absent. Raises ParseError naming the 1-based offending line.
    """
    rows: list[SparseRow] = []
    labels: list[float] = []
    max_idx = -1
    lineno = 0
    for lineno, line in enumerate(io.StringIO(text), start=1):
        if not line.strip():
            continue
        label, idx, val = _parse_line(line, lineno)
        if idx.size:
            max_idx = max(max_idx, int(idx[-1]))
        rows.append(SparseRow(idx, val))
        labels.append(label)
    if not rows:
        raise ParseError("empty input: no data lines found")
    inferred = max_idx + 1
    if dim is None:
        dim = inferred
    elif dim < inferred:
        raise ParseError(f"dim={dim} smaller than max index + 1 = {inferred}")
    return Dataset(rows, np.asarray(labels), dim, name)


def load_libsvm(path: str, dim: int | None = None, name: str | None = None) -> Dataset:
    """Read a LIBSVM file; '.gz' suffix selects transparent decompression."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt") as fh:
        text = fh.read()
    return parse_libsvm(text, dim=dim, name=name if name is not None else str(path))


def serialize_libsvm(ds: Dataset) -> str:
    """Canonical LIBSVM text: '+1'/'-1' labels, 1-based sorted indices,
    shortest round-trip float values, one trailing newline per line."""
    out = []
    for row, y in zip(ds.rows, ds.labels):
        parts = ["+1" if y > 0 else "-1"]
        parts += [f"{i + 1}:{float(v)!r}" for i, v in zip(row.indices, row.values)]
        out.append(" ".join(parts))
    return "\n".join(out) + "\n"


def subsample(ds: Dataset, count: int, seed: int) -> Dataset:
    """Draw `count` rows without replacement, deterministically in `seed`."""
    if not 1 <= count <= ds.m:
        raise ValueError(f"count must be in [1, {ds.m}], got {count}")
    rng = np.random.default_rng(seed)
    pick = rng.choice(ds.m, size=count, replace=False)
    rows = [ds.rows[i] for i in pick]
    return Dataset(rows, ds.labels[pick], ds.dim, f"{ds.name}#sub{count}s{seed}")


def dataset_fingerprint(ds: Dataset) -> str:
    """Stable content hash (dim, labels, rows); used for cache keys."""
    h = hashlib.sha256()
    h.update(f"{ds.m}:{ds.dim}|".encode())
    h.update(ds.labels.tobytes())
    for r in ds.rows:
        h.update(r.indices.tobytes())
        h.update(r.values.tobytes())
    return h.hexdigest()[:16]
