"""Problem instances: construction, assumption checks, file format, broadcasting.

A problem is the backward controlled system

    y_k = A_k E_{k-1}[y_{k+1}] + B_k u_k + C_k E_{k-1}[y_{k+1} w_k] + q_k,   y_N = xi,

with the quadratic cost

    1/2 E{ <G0 y_0, y_0> + sum_k [ <Q_k d_k, d_k> + 2 <S_k d_k, u_k> + <R_k u_k, u_k>
                                    + 2 <eta_k, d_k> + 2 <rho_k, u_k> ] },

where ``d_k = E_{k-1}[y_{k+1}]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

import numpy as np

from . import _linalg
from .errors import AssumptionError, SpecParseError, StructureError
from .tree import AdaptedProcess, TreeSpace

MATRIX_FIELDS = ("A", "B", "C", "Q", "S", "R")
ADAPTED_FIELDS = ("q", "eta", "rho")
ALL_FIELDS = ("horizon", "state_dim", "control_dim", *MATRIX_FIELDS, "G0", *ADAPTED_FIELDS, "xi")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def _matrix_sequence(name, value, horizon, shape) -> tuple[np.ndarray, ...]:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 2:
        arr = np.broadcast_to(arr, (horizon, *arr.shape))
    if arr.ndim != 3 or arr.shape[0] != horizon:
        raise StructureError(f"{name}: expected one {shape[0]}x{shape[1]} matrix or a list of {horizon}")
    if arr.shape[1:] != shape:
        raise StructureError(f"{name}: expected shape {shape}, got {arr.shape[1:]}")
    if not np.all(np.isfinite(arr)):
        raise StructureError(f"{name}: non-finite entries")
    return tuple(_frozen(m) for m in arr)


def _adapted_entry(name, k, value, dim) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        if arr.shape != (dim,):
            raise StructureError(f"{name}[{k}]: expected a {dim}-vector, got shape {arr.shape}")
    elif arr.ndim == 2:
        if arr.shape != (1 << k, dim):
            raise StructureError(
                f"{name}[{k}]: node-count mismatch, expected ({1 << k}, {dim}) got {arr.shape}"
            )
    else:
        raise StructureError(f"{name}[{k}]: expected a vector or a per-atom table")
    if not np.all(np.isfinite(arr)):
        raise StructureError(f"{name}[{k}]: non-finite entries")
    return _frozen(arr)


def _adapted_sequence(name, value, horizon, dim) -> tuple[np.ndarray, ...]:
    if isinstance(value, AdaptedProcess):
        if (value.start, value.stop) != (0, horizon):
            raise StructureError(f"{name}: expected times 0..{horizon - 1}")
        return tuple(_adapted_entry(name, k, v, dim) for k, v in enumerate(value.values))
    if isinstance(value, np.ndarray) and value.ndim == 1 or _is_vector(value):
        vec = _adapted_entry(name, 0, value, dim)
        return tuple(vec for _ in range(horizon))
    items = list(value)
    if len(items) != horizon:
        raise StructureError(f"{name}: expected {horizon} entries, got {len(items)}")
    return tuple(_adapted_entry(name, k, v, dim) for k, v in enumerate(items))


def _is_vector(value) -> bool:
    return isinstance(value, (list, tuple)) and all(
        isinstance(x, (int, float)) and not isinstance(x, bool) for x in value
    )


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """A full problem instance.

    Coefficients accept a single matrix (constant in time) or a length-``N``
    sequence.  ``q``, ``eta``, ``rho`` accept a single vector, or a length-``N``
    sequence whose ``k``-th entry is a vector or a ``(2**k, d)`` per-atom array.
    ``xi`` is a vector or a ``(2**N, n)`` per-atom array.  Everything is stored
    normalized to per-step tuples of read-only arrays.
    """

    horizon: int
    state_dim: int
    control_dim: int
    A: Any
    B: Any
    C: Any
    Q: Any
    S: Any
    R: Any
    G0: Any
    q: Any = None
    eta: Any = None
    rho: Any = None
    xi: Any = None

    def __post_init__(self):
        N, n, m = self.horizon, self.state_dim, self.control_dim
        for name, v in (("horizon", N), ("state_dim", n), ("control_dim", m)):
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise StructureError(f"{name} must be an integer")
        if N < 1:
            raise StructureError("horizon must be ≥ 1")
        if n < 1 or m < 1:
            raise StructureError("state_dim and control_dim must be ≥ 1")
        shapes = {"A": (n, n), "B": (n, m), "C": (n, n), "Q": (n, n), "S": (m, n), "R": (m, m)}
        setter = object.__setattr__
        for name, shape in shapes.items():
            setter(self, name, _matrix_sequence(name, getattr(self, name), N, shape))
        g0 = np.asarray(self.G0, dtype=float)
        if g0.shape != (n, n) or not np.all(np.isfinite(g0)):
            raise StructureError(f"G0: expected a finite {n}x{n} matrix")
        setter(self, "G0", _frozen(g0))
        for name, dim in (("q", n), ("eta", n), ("rho", m)):
            value = getattr(self, name)
            if value is None:
                value = np.zeros(dim)
            setter(self, name, _adapted_sequence(name, value, N, dim))
        xi = np.zeros(n) if self.xi is None else self.xi
        if isinstance(xi, AdaptedProcess):
            xi = xi.values[-1]
        xi = np.asarray(xi, dtype=float)
        if xi.shape not in ((n,), (1 << N, n)):
            raise StructureError(f"xi: node-count mismatch, expected ({n},) or ({1 << N}, {n}), got {xi.shape}")
        if not np.all(np.isfinite(xi)):
            raise StructureError("xi: non-finite entries")
        setter(self, "xi", _frozen(xi))

    @property
    def n(self):
        return self.state_dim

    @property
    def m(self):
        return self.control_dim

    def replace(self, **changes) -> "ProblemSpec":
        kw = {name: getattr(self, name) for name in ALL_FIELDS}
        kw.update(changes)
        return ProblemSpec(**kw)

    def symmetrized(self) -> "ProblemSpec":
        return self.replace(
            G0=_linalg.sym(self.G0),
            Q=[_linalg.sym(x) for x in self.Q],
            R=[_linalg.sym(x) for x in self.R],
        )

    def homogeneous(self) -> "ProblemSpec":
        """Same coefficients with ``xi = q = eta = rho = 0``."""
        return self.replace(q=None, eta=None, rho=None, xi=None)

    def is_deterministic(self) -> bool:
        return all(v.ndim == 1 for v in (*self.q, *self.eta, *self.rho, self.xi))

    def __eq__(self, other):
        if not isinstance(other, ProblemSpec):
            return NotImplemented
        for name in ALL_FIELDS:
            a, b = getattr(self, name), getattr(other, name)
            if isinstance(a, tuple):
                if len(a) != len(b) or not all(
                    x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b)
                ):
                    return False
            elif isinstance(a, np.ndarray):
                if a.shape != b.shape or not np.array_equal(a, b):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None


# ---------------------------------------------------------------------------
# assumption checks


@dataclass(frozen=True)
class Violation:
    kind: str
    index: int | None
    magnitude: float
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def messages(self) -> list[str]:
        return [v.message for v in self.violations]

    def to_dict(self):
        return {
            "ok": self.ok,
            "violations": [
                {"kind": v.kind, "index": v.index, "magnitude": v.magnitude, "message": v.message}
                for v in self.violations
            ],
        }


def validate_spec(spec: ProblemSpec) -> ValidationReport:
    """Check symmetry, ``G0 >= 0``, ``R_k >> 0`` and ``Q_k - S_k^T R_k^{-1} S_k >= 0``."""
    out: list[Violation] = []

    def check_sym(label, idx, mat):
        a = _linalg.asymmetry(mat)
        if a > _linalg.TOL_SYM:
            out.append(Violation("asymmetric", idx, a, f"{label} not symmetric (relative asymmetry {a:.3e})"))

    check_sym("G0", None, spec.G0)
    g = _linalg.min_eig(spec.G0)
    if g < -_linalg.TOL_PSD * _linalg.scale(spec.G0):
        out.append(Violation("G0_not_psd", None, g, f"G0 not PSD (min eigenvalue {g:.6g})"))
    for k in range(spec.horizon):
        Q, S, R = spec.Q[k], spec.S[k], spec.R[k]
        check_sym(f"Q_{k}", k, Q)
        check_sym(f"R_{k}", k, R)
        r = _linalg.min_eig(R)
        if r < _linalg.TOL_UNIFORM * _linalg.scale(R):
            out.append(Violation("R_not_uniformly_positive", k, r,
                                 f"R_{k} not uniformly positive (min eigenvalue {r:.6g})"))
            continue
        schur = Q - S.T @ np.linalg.solve(_linalg.sym(R), S)
        s = _linalg.min_eig(schur)
        if s < -_linalg.TOL_PSD * _linalg.scale(schur):
            out.append(Violation("schur_not_psd", k, s,
                                 f"Q_{k} − S_{k}ᵀR_{k}⁻¹S_{k} not PSD (min eigenvalue {s:.6g})"))
    return ValidationReport(tuple(out))


def prepare(spec: ProblemSpec) -> ProblemSpec:
    """Validate and return the symmetrized spec; raise :class:`AssumptionError` otherwise."""
    report = validate_spec(spec)
    if not report.ok:
        raise AssumptionError(report)
    return spec.symmetrized()


# ---------------------------------------------------------------------------
# broadcasting onto the tree


@dataclass(frozen=True, eq=False)
class TreeProblem:
    """A spec with all adapted data materialized on the tree."""

    spec: ProblemSpec
    tree: TreeSpace
    q: AdaptedProcess
    eta: AdaptedProcess
    rho: AdaptedProcess
    xi: np.ndarray = field(repr=False)


def _materialize(entry: np.ndarray, k: int) -> np.ndarray:
    if entry.ndim == 1:
        return np.repeat(entry[None, :], 1 << k, axis=0)
    if entry.shape[0] != 1 << k:
        raise StructureError(f"node-count mismatch at time {k}: {entry.shape[0]} != {1 << k}")
    return entry


def broadcast(spec: ProblemSpec, tree: TreeSpace | None = None) -> TreeProblem:
    tree = TreeSpace(spec.horizon) if tree is None else tree
    if tree.depth != spec.horizon:
        raise StructureError(f"tree depth {tree.depth} != horizon {spec.horizon}")
    procs = {
        name: AdaptedProcess(_materialize(v, k) for k, v in enumerate(getattr(spec, name)))
        for name in ADAPTED_FIELDS
    }
    xi = _materialize(spec.xi, spec.horizon).copy()
    xi.setflags(write=False)
    return TreeProblem(spec, tree, xi=xi, **procs)


# ---------------------------------------------------------------------------
# file format


def _fail(msg, loc):
    raise SpecParseError(msg, loc)


def _number(x, loc) -> float:
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        _fail(f"expected a number, got {type(x).__name__}", loc)
    return float(x)


def _parse_vector(v, loc, dim=None) -> np.ndarray:
    if not isinstance(v, list):
        _fail("expected an array of numbers", loc)
    out = np.array([_number(x, f"{loc}[{i}]") for i, x in enumerate(v)])
    if dim is not None and out.shape != (dim,):
        _fail(f"expected length {dim}, got {len(v)}", loc)
    return out


def _parse_matrix(v, loc, shape) -> np.ndarray:
    if not isinstance(v, list) or len(v) != shape[0]:
        _fail(f"expected {shape[0]} rows", loc)
    return np.array([_parse_vector(row, f"{loc}[{i}]", shape[1]) for i, row in enumerate(v)])


def _depth(v) -> int:
    d = 0
    while isinstance(v, list):
        d += 1
        if not v:
            break
        v = v[0]
    return d


def _parse_matrix_field(v, loc, shape, horizon):
    d = _depth(v)
    if d == 2:
        return _parse_matrix(v, loc, shape)
    if d == 3:
        if len(v) != horizon:
            _fail(f"expected {horizon} matrices, got {len(v)}", loc)
        return [_parse_matrix(x, f"{loc}[{k}]", shape) for k, x in enumerate(v)]
    _fail("expected a matrix or a list of matrices", loc)


def _parse_table(v, loc, dim) -> dict[int, dict[int, np.ndarray]]:
    if set(v) != {"atoms"} or not isinstance(v["atoms"], list):
        _fail('a tree-table must be {"atoms": [[path-bits, vector], ...]}', loc)
    levels: dict[int, dict[int, np.ndarray]] = {}
    for i, item in enumerate(v["atoms"]):
        iloc = f"{loc}.atoms[{i}]"
        if not (isinstance(item, list) and len(item) == 2 and isinstance(item[0], list)):
            _fail("expected [path-bits, vector]", iloc)
        bits = item[0]
        if any(b not in (0, 1) or isinstance(b, bool) for b in bits):
            _fail("path bits must be 0 or 1", iloc)
        k = len(bits)
        idx = int("".join(map(str, bits)), 2) if bits else 0
        lvl = levels.setdefault(k, {})
        if idx in lvl:
            _fail(f"duplicate atom {bits}", iloc)
        lvl[idx] = _parse_vector(item[1], f"{iloc}[1]", dim)
    return levels


def _table_level(levels, k, loc) -> np.ndarray:
    lvl = levels.get(k, {})
    if len(lvl) != 1 << k:
        _fail(f"node-count mismatch: level {k} needs {1 << k} atoms, got {len(lvl)}", loc)
    return np.array([lvl[i] for i in range(1 << k)])


def _parse_adapted_field(v, loc, dim, horizon):
    if isinstance(v, dict):
        levels = _parse_table(v, loc, dim)
        extra = set(levels) - set(range(horizon))
        if extra:
            _fail(f"path lengths {sorted(extra)} outside 0..{horizon - 1}", loc)
        return [_table_level(levels, k, loc) for k in range(horizon)]
    if not isinstance(v, list):
        _fail("expected a vector, a list of vectors, or a tree-table", loc)
    if v and any(isinstance(x, (list, dict)) for x in v):
        if len(v) != horizon:
            _fail(f"expected {horizon} entries, got {len(v)}", loc)
        out = []
        for k, item in enumerate(v):
            iloc = f"{loc}[{k}]"
            if isinstance(item, dict):
                levels = _parse_table(item, iloc, dim)
                if set(levels) - {k}:
                    _fail(f"entry {k} must use paths of length {k}", iloc)
                out.append(_table_level(levels, k, iloc))
            else:
                out.append(_parse_vector(item, iloc, dim))
        return out
    return _parse_vector(v, loc, dim)


def _reject_constant(name):
    raise SpecParseError(f"non-finite number {name} is not allowed")


def parse_spec_dict(doc: dict) -> ProblemSpec:
    if not isinstance(doc, dict):
        _fail("top level must be an object", "$")
    unknown = sorted(set(doc) - set(ALL_FIELDS))
    if unknown:
        _fail(f"unknown field(s) {unknown}", "$")
    for req in ("horizon", "state_dim", "control_dim", *MATRIX_FIELDS, "G0"):
        if req not in doc:
            _fail("missing required field", req)
    dims = {}
    for name in ("horizon", "state_dim", "control_dim"):
        v = doc[name]
        if isinstance(v, bool) or not isinstance(v, int):
            _fail("expected an integer", name)
        dims[name] = v
    N, n, m = dims["horizon"], dims["state_dim"], dims["control_dim"]
    if N < 1:
        _fail("horizon must be ≥ 1", "horizon")
    if n < 1 or m < 1:
        _fail("dimensions must be ≥ 1", "state_dim" if n < 1 else "control_dim")
    shapes = {"A": (n, n), "B": (n, m), "C": (n, n), "Q": (n, n), "S": (m, n), "R": (m, m)}
    kw: dict[str, Any] = dict(dims)
    for name, shape in shapes.items():
        kw[name] = _parse_matrix_field(doc[name], name, shape, N)
    kw["G0"] = _parse_matrix(doc["G0"], "G0", (n, n))
    for name, dim in (("q", n), ("eta", n), ("rho", m)):
        if name in doc:
            kw[name] = _parse_adapted_field(doc[name], name, dim, N)
    if "xi" in doc:
        v = doc["xi"]
        if isinstance(v, dict):
            levels = _parse_table(v, "xi", n)
            if set(levels) - {N}:
                _fail(f"xi atoms must use paths of length {N}", "xi")
            kw["xi"] = _table_level(levels, N, "xi")
        else:
            kw["xi"] = _parse_vector(v, "xi", n)
    return ProblemSpec(**kw)


def load_spec(text: str | bytes) -> ProblemSpec:
    """Parse a problem file (strict JSON; unknown fields are rejected)."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise SpecParseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from exc
    return parse_spec_dict(doc)


def _fmt(x: float) -> str:
    s = format(float(x), ".17g")
    if s in ("nan", "inf", "-inf"):
        raise ValueError("non-finite value cannot be serialized")
    return s


def _emit_vector(v) -> str:
    return "[" + ", ".join(_fmt(x) for x in v) + "]"


def _emit_matrix(m, indent) -> str:
    pad = " " * indent
    return "[" + (",\n" + pad + " ").join(_emit_vector(r) for r in m) + "]"


def _all_equal(seq) -> bool:
    return all(x.shape == seq[0].shape and np.array_equal(x, seq[0]) for x in seq[1:])


def _emit_table(arr, k, indent) -> str:
    pad = " " * (indent + 2)
    rows = []
    for idx, vec in enumerate(arr):
        bits = [int(b) for b in format(idx, f"0{k}b")] if k else []
        rows.append(f"[{json.dumps(bits)}, {_emit_vector(vec)}]")
    return '{"atoms": [\n' + pad + (",\n" + pad).join(rows) + "]}"


def _emit_adapted(seq, indent) -> str:
    if _all_equal(seq) and seq[0].ndim == 1:
        return _emit_vector(seq[0])
    pad = " " * (indent + 2)
    items = [
        _emit_vector(v) if v.ndim == 1 else _emit_table(v, k, indent + 2) for k, v in enumerate(seq)
    ]
    return "[\n" + pad + (",\n" + pad).join(items) + "]"


def dumps_spec(spec: ProblemSpec) -> str:
    """Serialize with 17 significant digits so that reloading is bit-exact."""
    parts = [
        f'"horizon": {spec.horizon}',
        f'"state_dim": {spec.state_dim}',
        f'"control_dim": {spec.control_dim}',
    ]
    for name in MATRIX_FIELDS:
        seq = getattr(spec, name)
        key = f'"{name}": '
        if _all_equal(seq):
            parts.append(key + _emit_matrix(seq[0], 2 + len(key)))
        else:
            parts.append(key + "[\n    " + ",\n    ".join(_emit_matrix(mat, 4) for mat in seq) + "]")
    parts.append('"G0": ' + _emit_matrix(spec.G0, 8))
    for name in ADAPTED_FIELDS:
        parts.append(f'"{name}": ' + _emit_adapted(getattr(spec, name), 2))
    xi = spec.xi
    parts.append('"xi": ' + (_emit_vector(xi) if xi.ndim == 1 else _emit_table(xi, spec.horizon, 2)))
    return "{\n  " + ",\n  ".join(parts) + "\n}\n"


def save_spec(spec: ProblemSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_spec(spec))


def example_text() -> str:
    """The built-in four-period example problem file, byte for byte."""
    return resources.files("bslq").joinpath("data/example.json").read_text(encoding="utf-8")


def example_spec() -> ProblemSpec:
    return load_spec(example_text())


def spec_schema() -> dict:
    """JSON Schema (draft 2020-12) describing the problem file."""
    num = {"type": "number"}
    vec = {"type": "array", "items": num, "minItems": 1}
    mat = {"type": "array", "items": vec, "minItems": 1}
    table = {
        "type": "object",
        "properties": {
            "atoms": {
                "type": "array",
                "items": {
                    "type": "array",
                    "prefixItems": [{"type": "array", "items": {"enum": [0, 1]}}, vec],
                    "minItems": 2,
                    "maxItems": 2,
                },
            }
        },
        "required": ["atoms"],
        "additionalProperties": False,
    }
    coef = {"oneOf": [mat, {"type": "array", "items": mat, "minItems": 1}]}
    adapted = {"oneOf": [vec, table, {"type": "array", "items": {"oneOf": [vec, table]}, "minItems": 1}]}
    pos = {"type": "integer", "minimum": 1}
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "bslq problem file",
        "type": "object",
        "properties": {
            "horizon": pos,
            "state_dim": pos,
            "control_dim": pos,
            **{name: coef for name in MATRIX_FIELDS},
            "G0": mat,
            "q": adapted,
            "eta": adapted,
            "rho": adapted,
            "xi": {"oneOf": [vec, table]},
        },
        "required": ["horizon", "state_dim", "control_dim", *MATRIX_FIELDS, "G0"],
        "additionalProperties": False,
    }


# ---------------------------------------------------------------------------
# random instances


def random_spec(
    rng: np.random.Generator,
    horizon: int,
    state_dim: int,
    control_dim: int,
    *,
    adapted: bool = True,
    time_varying: bool = True,
    coef_scale: float = 0.6,
) -> ProblemSpec:
    """A random instance satisfying the standing assumptions.

    ``Q_k`` is built as ``S_k^T R_k^{-1} S_k`` plus a random PSD matrix, so the
    Schur-complement condition holds by construction.
    """
    N, n, m = horizon, state_dim, control_dim
    T = N if time_varying else 1

    def psd(d, rank=None):
        F = rng.standard_normal((d, rank or d))
        return F @ F.T / d

    A = [coef_scale * rng.standard_normal((n, n)) for _ in range(T)]
    B = [coef_scale * rng.standard_normal((n, m)) for _ in range(T)]
    C = [coef_scale * rng.standard_normal((n, n)) for _ in range(T)]
    R = [_linalg.sym(psd(m) + 0.5 * np.eye(m)) for _ in range(T)]
    S = [0.5 * rng.standard_normal((m, n)) for _ in range(T)]
    Q = [_linalg.sym(s.T @ np.linalg.solve(r, s) + psd(n)) for s, r in zip(S, R)]
    G0 = _linalg.sym(psd(n))
    if not time_varying:
        A, B, C, R, S, Q = (x[0] for x in (A, B, C, R, S, Q))

    def data(d):
        if adapted:
            return [rng.standard_normal((1 << k, d)) for k in range(N)]
        return rng.standard_normal(d)

    xi = rng.standard_normal((1 << N, n)) if adapted else rng.standard_normal(n)
    return ProblemSpec(N, n, m, A=A, B=B, C=C, Q=Q, S=S, R=R, G0=G0,
                       q=data(n), eta=data(n), rho=data(m), xi=xi)
