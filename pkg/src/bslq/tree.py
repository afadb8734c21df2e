"""Exact finite probability space driven by Rademacher noise.

Atoms of ``F_{k-1}`` are the bit-paths ``(w_0, ..., w_{k-1})`` with ``w = +1``
encoded as bit 0 and ``w = -1`` as bit 1.  An atom's index is its bit-path read
as a binary number (``w_0`` most significant), so the two children of atom ``h``
are ``2h`` (``w_k = +1``) and ``2h + 1`` (``w_k = -1``).

Every process in this package is stored level-wise: the value at time ``k`` is
an array of shape ``(2**k, d)``, one row per ``F_{k-1}`` atom.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

from .errors import DepthError, StructureError

DEFAULT_PATH_CAP = 22


def path_cap() -> int:
    """Largest admissible tree depth; ``BSLQ_MAX_DEPTH`` overrides the default."""
    raw = os.environ.get("BSLQ_MAX_DEPTH")
    if raw is None:
        return DEFAULT_PATH_CAP
    try:
        return int(raw)
    except ValueError as exc:
        raise DepthError(f"BSLQ_MAX_DEPTH must be an integer, got {raw!r}") from exc


@dataclass(frozen=True)
class TreeSpace:
    """Binary non-recombining tree of the given depth (the horizon ``N``)."""

    depth: int

    def __post_init__(self):
        if self.depth < 1:
            raise StructureError("tree depth must be >= 1")
        cap = path_cap()
        if self.depth > cap:
            raise DepthError(
                f"tree depth {self.depth} exceeds path cap {cap} (set BSLQ_MAX_DEPTH to override)"
            )

    branch_values = (1.0, -1.0)

    def atoms(self, k: int) -> int:
        """Number of atoms of ``F_{k-1}``; ``k = 0`` is the trivial sigma-field."""
        if not 0 <= k <= self.depth:
            raise StructureError(f"time index {k} outside 0..{self.depth}")
        return 1 << k

    def probability(self, k: int) -> Fraction:
        return Fraction(1, 1 << k)

    def noise(self, k: int) -> np.ndarray:
        """Value of ``w_k`` on each of the ``2**(k+1)`` atoms of ``F_k``."""
        return np.tile(np.array(self.branch_values), 1 << k)


def enumerate_paths(tree: TreeSpace) -> list[tuple[tuple[int, ...], Fraction]]:
    """All full noise paths ``(w_0, ..., w_{N-1})`` in atom order, with exact probabilities."""
    n = tree.depth
    p = tree.probability(n)
    out = []
    for idx in range(1 << n):
        bits = [(idx >> (n - 1 - i)) & 1 for i in range(n)]
        out.append((tuple(1 - 2 * b for b in bits), p))
    return out


def path_bits(k: int, index: int) -> str:
    """Bit-path string of atom ``index`` of ``F_{k-1}`` (empty at ``k = 0``)."""
    return format(index, f"0{k}b") if k else ""


class AdaptedProcess:
    """A vector process indexed by time and filtration atom.

    ``values[j]`` holds the value at time ``start + j`` as an array with one row
    per atom of ``F_{start + j - 1}``.  Instances are immutable.
    """

    __slots__ = ("_values", "_start")

    def __init__(self, values: Iterable[np.ndarray], start: int = 0):
        vals = []
        for j, v in enumerate(values):
            arr = np.array(v, dtype=float)
            if arr.ndim != 2:
                raise StructureError(f"time {start + j}: expected a 2-d array, got shape {arr.shape}")
            if arr.shape[0] != 1 << (start + j):
                raise StructureError(
                    f"time {start + j}: expected {1 << (start + j)} atoms, got {arr.shape[0]}"
                )
            if not np.all(np.isfinite(arr)):
                raise StructureError(f"time {start + j}: non-finite entries")
            arr.setflags(write=False)
            vals.append(arr)
        if not vals:
            raise StructureError("an adapted process needs at least one time step")
        dims = {v.shape[1] for v in vals}
        if len(dims) != 1:
            raise StructureError(f"inconsistent vector dimensions {sorted(dims)}")
        self._values = tuple(vals)
        self._start = start

    @classmethod
    def constant(cls, vector, times: int, start: int = 0) -> "AdaptedProcess":
        vec = np.asarray(vector, dtype=float).reshape(1, -1)
        return cls((np.repeat(vec, 1 << k, axis=0) for k in range(start, start + times)), start)

    @classmethod
    def zeros(cls, dim: int, times: int, start: int = 0) -> "AdaptedProcess":
        return cls((np.zeros((1 << k, dim)) for k in range(start, start + times)), start)

    @property
    def values(self) -> tuple[np.ndarray, ...]:
        return self._values

    @property
    def start(self) -> int:
        return self._start

    @property
    def stop(self) -> int:
        """One past the last time index."""
        return self._start + len(self._values)

    @property
    def dim(self) -> int:
        return self._values[0].shape[1]

    def __len__(self):
        return len(self._values)

    def __getitem__(self, k: int) -> np.ndarray:
        if not self._start <= k < self.stop:
            raise IndexError(f"time {k} outside {self._start}..{self.stop - 1}")
        return self._values[k - self._start]

    def _check_same(self, other: "AdaptedProcess"):
        if (self._start, self.stop, self.dim) != (other._start, other.stop, other.dim):
            raise StructureError(
                f"shape mismatch: times {self._start}..{self.stop - 1} dim {self.dim} vs "
                f"times {other._start}..{other.stop - 1} dim {other.dim}"
            )

    def __add__(self, other: "AdaptedProcess") -> "AdaptedProcess":
        self._check_same(other)
        return AdaptedProcess((a + b for a, b in zip(self._values, other._values)), self._start)

    def __sub__(self, other: "AdaptedProcess") -> "AdaptedProcess":
        self._check_same(other)
        return AdaptedProcess((a - b for a, b in zip(self._values, other._values)), self._start)

    def __mul__(self, scalar: float) -> "AdaptedProcess":
        return AdaptedProcess((scalar * a for a in self._values), self._start)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def max_abs_diff(self, other: "AdaptedProcess") -> float:
        self._check_same(other)
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self._values, other._values))

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a))) for a in self._values)

    def is_deterministic(self, atol: float = 0.0) -> bool:
        return all(np.all(np.abs(v - v[:1]) <= atol) for v in self._values)

    def stacked(self) -> np.ndarray:
        """All entries as one flat vector, time-major then atom then component."""
        return np.concatenate([v.ravel() for v in self._values])

    @classmethod
    def unstack(cls, flat, dim: int, times: int, start: int = 0) -> "AdaptedProcess":
        flat = np.asarray(flat, dtype=float)
        out, offset = [], 0
        for k in range(start, start + times):
            size = (1 << k) * dim
            out.append(flat[offset : offset + size].reshape(1 << k, dim))
            offset += size
        if offset != flat.size:
            raise StructureError(f"expected {offset} entries, got {flat.size}")
        return cls(out, start)

    def __repr__(self):
        return f"AdaptedProcess(times={self._start}..{self.stop - 1}, dim={self.dim})"


def cond_pair(next_values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(E_{k-1}[v], E_{k-1}[v w_k])`` for ``v`` given on the ``2**(k+1)`` atoms of ``F_k``.

    Works on any array whose first axis (or second, for batched input of
    shape ``(batch, atoms, d)``) enumerates the atoms.
    """
    v = np.asarray(next_values)
    axis = 0 if v.ndim <= 2 else 1
    if v.shape[axis] % 2:
        raise StructureError(f"level mismatch: odd atom count {v.shape[axis]}")
    up = v[0::2] if axis == 0 else v[:, 0::2]
    down = v[1::2] if axis == 0 else v[:, 1::2]
    return 0.5 * (up + down), 0.5 * (up - down)


def expectation(values: np.ndarray) -> np.ndarray:
    """Expectation of a level-``k`` array (``2**k`` equally likely rows)."""
    v = np.asarray(values)
    rows = v.shape[0]
    k = rows.bit_length() - 1
    if rows != 1 << k:
        raise StructureError(f"atom count {rows} is not a power of two")
    return np.ldexp(v.sum(axis=0), -k)


def expect_sum(proc_a: AdaptedProcess, proc_b: AdaptedProcess) -> float:
    """``E sum_k <a_k, b_k>`` computed exactly level by level."""
    proc_a._check_same(proc_b)
    total = 0.0
    for a, b in zip(proc_a.values, proc_b.values):
        total += float(expectation(np.einsum("ij,ij->i", a, b)))
    return total


def children(values: np.ndarray) -> np.ndarray:
    """Repeat level-``k`` rows onto both children at level ``k + 1``."""
    return np.repeat(np.asarray(values), 2, axis=0)


def write_csv(processes: dict[str, AdaptedProcess], stream=None) -> str:
    """Dump processes as CSV rows ``process,time,path,component,value``."""
    buf = stream if stream is not None else io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["process", "time", "path", "component", "value"])
    for name, proc in processes.items():
        for k in range(proc.start, proc.stop):
            for idx, row in enumerate(proc[k]):
                bits = path_bits(k, idx)
                for c, val in enumerate(row):
                    w.writerow([name, k, bits, c, repr(float(val))])
    return buf.getvalue() if stream is None else ""


def read_csv(text: str) -> dict[str, AdaptedProcess]:
    """Inverse of :func:`write_csv`."""
    rows = list(csv.DictReader(io.StringIO(text)))
    raw: dict[str, dict[int, dict[tuple[int, int], float]]] = {}
    for r in rows:
        k = int(r["time"])
        idx = int(r["path"], 2) if r["path"] else 0
        raw.setdefault(r["process"], {}).setdefault(k, {})[(idx, int(r["component"]))] = float(r["value"])
    out = {}
    for name, by_time in raw.items():
        times = sorted(by_time)
        dim = 1 + max(c for cell in by_time.values() for (_, c) in cell)
        arrays = []
        for k in times:
            arr = np.empty((1 << k, dim))
            for (idx, c), val in by_time[k].items():
                arr[idx, c] = val
            arrays.append(arr)
        out[name] = AdaptedProcess(arrays, times[0])
    return out
