"""Formula-free verification on the tree.

Nothing here uses the Riccati machinery.  The state equation and the cost are
evaluated exactly for arbitrary open-loop controls, the adjoint is rolled
forward from its definition, and the control problem is also solved as a dense
quadratic program assembled by probing the cost with unit controls.

Internally every evaluation carries a leading batch axis so that the QP probes
run vectorized; public functions accept and return single controls.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg as la

from .errors import DepthError, NumericalError, StructureError
from .problem import ProblemSpec, TreeProblem, broadcast
from .solver import FeedbackSolution
from .tree import AdaptedProcess, TreeSpace, cond_pair

DEFAULT_QP_CAP = 512
# Floats held by one chunk of batched cost probes.
PROBE_BUDGET = 1 << 22

DEFAULT_THRESHOLDS = {
    "stationarity": 1e-9,
    "homogeneous": 1e-12,
    "expansion": 1e-8,
    "qp_control": 1e-6,
    "qp_value": 1e-6,
    "superposition": 1e-10,
    "scaling": 1e-12,
    "value_match": 1e-8,
    "terminal": 1e-9,
    "consistency": 1e-9,
    "boundary": 1e-10,
}


def _tp(problem: ProblemSpec | TreeProblem, tree: TreeSpace | None = None) -> TreeProblem:
    return problem if isinstance(problem, TreeProblem) else broadcast(problem, tree)


def control_dimension(spec: ProblemSpec) -> int:
    """Number of scalar control coordinates ``m (2^N - 1)``."""
    return spec.control_dim * ((1 << spec.horizon) - 1)


# ---------------------------------------------------------------------------
# batched kernels (leading axis = batch)


def _levels(u: AdaptedProcess | list) -> list[np.ndarray]:
    vals = u.values if isinstance(u, AdaptedProcess) else u
    return [np.asarray(v)[None] if np.ndim(v) == 2 else np.asarray(v) for v in vals]


def _check_control(tp: TreeProblem, u):
    if isinstance(u, AdaptedProcess):
        if u.start != 0 or u.stop != tp.spec.horizon or u.dim != tp.spec.control_dim:
            raise StructureError(
                f"control must cover times 0..{tp.spec.horizon - 1} with dimension "
                f"{tp.spec.control_dim}, got {u!r}"
            )


def _bsde_batch(tp: TreeProblem, u: list[np.ndarray], xi=None, q=None) -> list[np.ndarray]:
    spec = tp.spec
    N = spec.horizon
    batch = u[0].shape[0]
    xi = tp.xi if xi is None else np.asarray(xi)
    q = tp.q if q is None else q
    y = [None] * (N + 1)
    y[N] = np.broadcast_to(xi, (batch,) + xi.shape[-2:]) if xi.ndim == 2 else xi
    for k in reversed(range(N)):
        drift, mart = cond_pair(y[k + 1])
        y[k] = drift @ spec.A[k].T + u[k] @ spec.B[k].T + mart @ spec.C[k].T + q[k]
    return y


def _mean_atoms(vals: np.ndarray, k: int) -> np.ndarray:
    return np.ldexp(vals.sum(axis=-1), -k)


def _cost_batch(tp: TreeProblem, u: list[np.ndarray], y: list[np.ndarray],
                homogeneous: bool = False) -> np.ndarray:
    spec = tp.spec
    y0 = y[0][:, 0, :]
    total = np.einsum("bi,ij,bj->b", y0, spec.G0, y0)
    for k in range(spec.horizon):
        d, _ = cond_pair(y[k + 1])
        uk = u[k]
        t = (np.einsum("bai,ij,baj->ba", d, spec.Q[k], d)
             + 2.0 * np.einsum("bai,ij,baj->ba", uk, spec.S[k], d)
             + np.einsum("bai,ij,baj->ba", uk, spec.R[k], uk))
        if not homogeneous:
            t = t + 2.0 * np.einsum("bai,ai->ba", d, tp.eta[k]) + 2.0 * np.einsum("bai,ai->ba", uk, tp.rho[k])
        total = total + _mean_atoms(t, k)
    return 0.5 * total


def _unstack_batch(z: np.ndarray, m: int, N: int) -> list[np.ndarray]:
    out, off = [], 0
    for k in range(N):
        size = (1 << k) * m
        out.append(z[:, off : off + size].reshape(z.shape[0], 1 << k, m))
        off += size
    return out


def _homogeneous(tp: TreeProblem) -> TreeProblem:
    return broadcast(tp.spec.homogeneous(), tp.tree)


def _stack_controls(controls) -> list[np.ndarray]:
    return [np.stack([c[k] for c in controls]) for k in range(controls[0].start, controls[0].stop)]


def homogeneous_costs(problem: ProblemSpec | TreeProblem, controls: list[AdaptedProcess],
                      tree: TreeSpace | None = None) -> np.ndarray:
    """Vectorized :func:`evaluate_cost_homogeneous` over a list of controls."""
    tp = _homogeneous(_tp(problem, tree))
    for c in controls:
        _check_control(tp, c)
    vl = _stack_controls(controls)
    return _cost_batch(tp, vl, _bsde_batch(tp, vl), homogeneous=True)


def expansion_errors(problem: ProblemSpec | TreeProblem, u: AdaptedProcess,
                     directions: list[AdaptedProcess], deltas, tree: TreeSpace | None = None) -> np.ndarray:
    """``|J(u + d v) - J(u) - d^2 J0(v)|`` for every direction ``v`` and step ``d``.

    Returns an array of shape ``(len(directions), len(deltas))``.
    """
    tp = _tp(problem, tree)
    _check_control(tp, u)
    deltas = np.asarray(deltas, dtype=float)
    vl = _stack_controls(directions)
    ul = _levels(u)
    shifted = [(a[None] + deltas[:, None, None, None] * b[None]).reshape((-1,) + a.shape[1:])
               for a, b in zip(ul, vl)]
    shifted = [np.concatenate([a, s]) for a, s in zip(ul, shifted)]
    costs = _cost_batch(tp, shifted, _bsde_batch(tp, shifted))
    base, moved = costs[0], costs[1:].reshape(len(deltas), len(directions))
    j0 = homogeneous_costs(tp, directions)
    return np.abs(moved - base - deltas[:, None] ** 2 * j0[None]).T


# ---------------------------------------------------------------------------
# single-control API


def evaluate_bsde(problem: ProblemSpec | TreeProblem, u: AdaptedProcess, *, xi=None, q=None,
                  tree: TreeSpace | None = None) -> AdaptedProcess:
    """Solve the state equation backward for the open-loop control ``u``.

    ``xi`` (shape ``(2^N, n)``) and ``q`` (an :class:`AdaptedProcess`) override
    the problem's terminal value and inhomogeneity.
    """
    tp = _tp(problem, tree)
    _check_control(tp, u)
    if xi is not None:
        xi = np.broadcast_to(np.asarray(xi, dtype=float), (1 << tp.spec.horizon, tp.spec.state_dim))
    y = _bsde_batch(tp, _levels(u), xi=xi, q=q)
    return AdaptedProcess(v[0] for v in y)


def evaluate_cost(problem: ProblemSpec | TreeProblem, u: AdaptedProcess,
                  y: AdaptedProcess | None = None, tree: TreeSpace | None = None) -> float:
    tp = _tp(problem, tree)
    _check_control(tp, u)
    ul = _levels(u)
    yl = _bsde_batch(tp, ul) if y is None else _levels(y)
    return float(_cost_batch(tp, ul, yl)[0])


def evaluate_cost_homogeneous(problem: ProblemSpec | TreeProblem, v: AdaptedProcess,
                              tree: TreeSpace | None = None) -> float:
    """Cost with ``xi = q = eta = rho = 0``; nonnegative under the convexity assumptions."""
    tp = _homogeneous(_tp(problem, tree))
    _check_control(tp, v)
    vl = _levels(v)
    return float(_cost_batch(tp, vl, _bsde_batch(tp, vl), homogeneous=True)[0])


def adjoint_forward(problem: ProblemSpec | TreeProblem, u: AdaptedProcess, y: AdaptedProcess,
                    tree: TreeSpace | None = None) -> AdaptedProcess:
    """``x_0 = G0 y_0``, ``x_{k+1} = A^T x + Q d + S^T u + eta + w_k C^T x``."""
    tp = _tp(problem, tree)
    spec = tp.spec
    x = [y[0] @ spec.G0.T]
    for k in range(spec.horizon):
        d, _ = cond_pair(y[k + 1])
        base = x[k] @ spec.A[k] + d @ spec.Q[k] + u[k] @ spec.S[k] + tp.eta[k]
        vol = x[k] @ spec.C[k]
        nxt = np.empty((2 * base.shape[0], spec.state_dim))
        nxt[0::2] = base + vol
        nxt[1::2] = base - vol
        x.append(nxt)
    return AdaptedProcess(x)


def stationarity_residuals(problem: ProblemSpec | TreeProblem, u: AdaptedProcess, y: AdaptedProcess,
                           x: AdaptedProcess, tree: TreeSpace | None = None) -> list[np.ndarray]:
    """Per-step, per-atom max-norm of ``B^T x + S d + R u + rho``."""
    tp = _tp(problem, tree)
    spec = tp.spec
    out = []
    for k in range(spec.horizon):
        d, _ = cond_pair(y[k + 1])
        r = x[k] @ spec.B[k] + d @ spec.S[k].T + u[k] @ spec.R[k].T + tp.rho[k]
        out.append(np.max(np.abs(r), axis=1))
    return out


def stationarity_residual(problem: ProblemSpec | TreeProblem, u: AdaptedProcess, y: AdaptedProcess,
                          x: AdaptedProcess, tree: TreeSpace | None = None) -> float:
    return max(float(r.max()) for r in stationarity_residuals(problem, u, y, x, tree))


@dataclass(frozen=True)
class ExpansionCheck:
    lhs: float
    rhs: float
    error: float
    linear_term: float


def quadratic_expansion_check(problem: ProblemSpec | TreeProblem, u: AdaptedProcess, v: AdaptedProcess,
                              delta: float, tree: TreeSpace | None = None) -> ExpansionCheck:
    """Compare ``J(u + delta v)`` with ``J(u) + delta^2 J0(v)``.

    ``error`` omits the first-order term, which vanishes exactly at the optimum.
    ``linear_term`` is the central difference ``(J(u+dv) - J(u-dv)) / (2 d)``.
    """
    tp = _tp(problem, tree)
    _check_control(tp, u)
    _check_control(tp, v)
    ul, vl = _levels(u), _levels(v)
    controls = [np.concatenate([a, a + delta * b, a - delta * b]) for a, b in zip(ul, vl)]
    base, plus, minus = _cost_batch(tp, controls, _bsde_batch(tp, controls))
    j0 = evaluate_cost_homogeneous(tp, v)
    lhs = float(plus)
    rhs = float(base) + delta * delta * j0
    return ExpansionCheck(lhs, rhs, abs(lhs - rhs), float((plus - minus) / (2.0 * delta)))


# ---------------------------------------------------------------------------
# brute-force quadratic program


@dataclass(frozen=True, eq=False)
class QuadraticModel:
    """``J(u) = 1/2 u^T hessian u + gradient^T u + constant`` over stacked controls."""

    hessian: np.ndarray
    gradient: np.ndarray
    constant: float
    probes: int

    def __call__(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.hessian @ z + self.gradient @ z + self.constant)


def _probe(tp: TreeProblem, z: np.ndarray) -> np.ndarray:
    spec = tp.spec
    N, m = spec.horizon, spec.control_dim
    per = (2 << N) * max(spec.state_dim, m)
    chunk = max(1, PROBE_BUDGET // per)
    out = np.empty(z.shape[0])
    for lo in range(0, z.shape[0], chunk):
        zc = z[lo : lo + chunk]
        ul = _unstack_batch(zc, m, N)
        out[lo : lo + chunk] = _cost_batch(tp, ul, _bsde_batch(tp, ul))
    return out


def assemble_qp(problem: ProblemSpec | TreeProblem, qp_cap: int = DEFAULT_QP_CAP,
                tree: TreeSpace | None = None) -> QuadraticModel:
    tp = _tp(problem, tree)
    M = control_dimension(tp.spec)
    if M > qp_cap:
        raise DepthError(f"control dimension {M} exceeds qp cap {qp_cap}")
    eye = np.eye(M)
    c0 = _probe(tp, np.zeros((1, M)))[0]
    plus = _probe(tp, eye)
    minus = _probe(tp, -eye)
    hess = np.diag(plus + minus - 2.0 * c0)
    grad = 0.5 * (plus - minus)
    iu, ju = np.triu_indices(M, 1)
    if iu.size:
        z = np.zeros((iu.size, M))
        z[np.arange(iu.size), iu] = 1.0
        z[np.arange(iu.size), ju] = 1.0
        off = _probe(tp, z) - plus[iu] - plus[ju] + c0
        hess[iu, ju] = off
        hess[ju, iu] = off
    return QuadraticModel(hess, grad, float(c0), 1 + 2 * M + iu.size)


def qp_solve(model: QuadraticModel, spec: ProblemSpec) -> AdaptedProcess:
    """Minimizer of the assembled quadratic, unstacked onto the tree."""
    hess = model.hessian
    scale = max(1.0, float(np.abs(hess).max())) if hess.size else 1.0
    try:
        cho = la.cho_factor(hess)
    except la.LinAlgError as exc:
        raise NumericalError("problem not uniformly convex", "qp") from exc
    if np.min(np.abs(np.diag(cho[0]))) ** 2 <= 1e-14 * scale:
        raise NumericalError("problem not uniformly convex", "qp")
    z = la.cho_solve(cho, -model.gradient)
    return AdaptedProcess.unstack(z, spec.control_dim, spec.horizon)


# ---------------------------------------------------------------------------
# linearity checks


def superposition_check(problem: ProblemSpec | TreeProblem, u: AdaptedProcess,
                        tree: TreeSpace | None = None) -> float:
    """``max |y(xi, u, q) - (y(xi, 0, 0) + y(0, u, 0) + y(0, 0, q))|``."""
    tp = _tp(problem, tree)
    spec = tp.spec
    zero_u = AdaptedProcess.zeros(spec.control_dim, spec.horizon)
    zero_q = AdaptedProcess.zeros(spec.state_dim, spec.horizon)
    full = evaluate_bsde(tp, u)
    parts = (evaluate_bsde(tp, zero_u, q=zero_q)
             + evaluate_bsde(tp, u, xi=0.0, q=zero_q)
             + evaluate_bsde(tp, zero_u, xi=0.0))
    return full.max_abs_diff(parts)


def scaling_check(problem: ProblemSpec | TreeProblem, u: AdaptedProcess, factor: float = 2.0,
                  tree: TreeSpace | None = None) -> float:
    """Relative error of ``||y(c xi, c u, c q)|| = c ||y(xi, u, q)||``."""
    tp = _tp(problem, tree)
    base = evaluate_bsde(tp, u)
    scaled = evaluate_bsde(tp, factor * u, xi=factor * tp.xi, q=factor * tp.q)
    norm = math.sqrt(sum(float(np.sum(v * v)) for v in base.values))
    norm_s = math.sqrt(sum(float(np.sum(v * v)) for v in scaled.values))
    return abs(norm_s - factor * norm) / max(1.0, factor * norm)


# ---------------------------------------------------------------------------
# replaying solver output


def replay_feedback(solution: FeedbackSolution, b: AdaptedProcess | None = None) -> AdaptedProcess:
    """Open-loop control ``K x* + b + correction`` along the solver's adjoint path.

    ``correction = u* - ubar*`` is whatever the solver adds on top of the
    feedback law; replacing ``b`` lets tests tamper with the offsets.
    """
    b = solution.b if b is None else b
    out = []
    for k, Kk in enumerate(solution.K):
        corr = solution.u_star[k] - solution.ubar_star[k]
        out.append(solution.x_star[k] @ Kk.T + b[k] + corr)
    return AdaptedProcess(out)


def tamper_offsets(solution: FeedbackSolution) -> FeedbackSolution:
    """Copy of ``solution`` with every offset ``b_k`` zeroed and the control replayed."""
    zero_b = AdaptedProcess(np.zeros_like(v) for v in solution.b.values)
    u = replay_feedback(solution, zero_b)
    ubar = AdaptedProcess(x @ Kk.T for x, Kk in zip(solution.x_star.values, solution.K))
    return solution.replace(b=zero_b, u_star=u, ubar_star=ubar)


# ---------------------------------------------------------------------------
# aggregated verification


@dataclass
class VerificationReport:
    seed: int
    thresholds: dict[str, float]
    oracle_cost: float
    stationarity_max_residual: float
    stationarity_per_step: list[float]
    homogeneous_min: float
    expansion_max_error: float
    superposition_error: float
    scaling_error: float
    terminal_error: float
    consistency_error: float
    boundary_error: float
    value_match: dict[str, float]
    matching_variant: str
    cost_gap_vs_qp: float | None = None
    control_gap_vs_qp: float | None = None
    qp_cost: float | None = None
    qp_value_gap: float | None = None
    checks: dict[str, bool] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["pass"] = self.passed
        return out


def random_control(rng: np.random.Generator, spec: ProblemSpec, scale: float = 1.0) -> AdaptedProcess:
    return AdaptedProcess(scale * rng.standard_normal((1 << k, spec.control_dim)) for k in range(spec.horizon))


def verify(spec: ProblemSpec, solution: FeedbackSolution, seed: int = 0, *,
           n_homogeneous: int = 100, n_expansion: int = 20, deltas=(0.5, 1.0, 2.0),
           qp: bool | None = None, qp_cap: int = DEFAULT_QP_CAP,
           thresholds: dict[str, float] | None = None) -> VerificationReport:
    """Run every oracle check against ``solution``; failures become report entries."""
    th = dict(DEFAULT_THRESHOLDS)
    if thresholds:
        unknown = set(thresholds) - set(th)
        if unknown:
            raise KeyError(f"unknown threshold(s): {', '.join(sorted(unknown))}")
        th.update(thresholds)
    rng = np.random.default_rng(seed)
    tp = broadcast(spec)
    warnings: list[str] = []

    u = solution.u_star
    y = evaluate_bsde(tp, u)
    x = adjoint_forward(tp, u, y)
    per_step = [float(r.max()) for r in stationarity_residuals(tp, u, y, x)]
    cost = evaluate_cost(tp, u, y)
    cost_scale = max(1.0, abs(cost))

    vs = [random_control(rng, spec) for _ in range(n_homogeneous)]
    homogeneous = list(homogeneous_costs(tp, vs)) if vs else []

    directions = [random_control(rng, spec) for _ in range(n_expansion)]
    expansion = float(expansion_errors(tp, u, directions, deltas).max()) / cost_scale if directions else 0.0

    y_scale = max(1.0, y.max_abs())
    superposition = superposition_check(tp, u) / y_scale
    scaling = scaling_check(tp, u)
    terminal = float(np.max(np.abs(solution.y_star[spec.horizon] - tp.xi)))
    consistency = solution.y_star.max_abs_diff(y) / y_scale
    boundary = float(np.max(np.abs(solution.x_star[0] - solution.y_star[0] @ spec.G0.T)))

    value_match = {name: abs(val - cost) for name, val in solution.values.items()}
    matching = min(value_match, key=value_match.get)
    if len(value_match) > 1 and len({round(v, 12) for v in solution.values.values()}) > 1:
        warnings.append(
            "value-function variants differ: "
            + ", ".join(f"{k}={v:.6g}" for k, v in sorted(solution.values.items()))
            + f"; oracle cost {cost:.6g}"
        )
    if value_match[matching] > th["value_match"] * cost_scale:
        warnings.append(f"no value-function variant matches the oracle cost {cost:.10g}")

    M = control_dimension(spec)
    run_qp = (M <= qp_cap) if qp is None else qp
    qp_fields: dict[str, Any] = {}
    if run_qp:
        model = assemble_qp(tp, qp_cap)
        u_qp = qp_solve(model, spec)
        qp_cost = evaluate_cost(tp, u_qp)
        qp_fields = {
            "qp_cost": qp_cost,
            "cost_gap_vs_qp": cost - qp_cost,
            "control_gap_vs_qp": u.max_abs_diff(u_qp),
            "qp_value_gap": abs(qp_cost - solution.value),
        }
        _, vecs = np.linalg.eigh(model.hessian)
        eig_dirs = [AdaptedProcess.unstack(col, spec.control_dim, spec.horizon) for col in vecs.T]
        homogeneous.extend(homogeneous_costs(tp, eig_dirs))
    elif qp:
        warnings.append("qp skipped")

    report = VerificationReport(
        seed=seed,
        thresholds=th,
        oracle_cost=cost,
        stationarity_max_residual=max(per_step),
        stationarity_per_step=per_step,
        homogeneous_min=float(min(homogeneous)) if homogeneous else 0.0,
        expansion_max_error=expansion,
        superposition_error=superposition,
        scaling_error=scaling,
        terminal_error=terminal,
        consistency_error=consistency,
        boundary_error=boundary,
        value_match=value_match,
        matching_variant=matching,
        warnings=warnings,
        **qp_fields,
    )
    checks = {
        "stationarity": report.stationarity_max_residual <= th["stationarity"],
        "homogeneous": report.homogeneous_min >= -th["homogeneous"],
        "expansion": report.expansion_max_error <= th["expansion"],
        "superposition": report.superposition_error <= th["superposition"],
        "scaling": report.scaling_error <= th["scaling"],
        "terminal": report.terminal_error <= th["terminal"],
        "consistency": report.consistency_error <= th["consistency"],
        "boundary": report.boundary_error <= th["boundary"],
        "value_match": value_match[matching] <= th["value_match"] * cost_scale,
    }
    if run_qp:
        checks["qp_control"] = report.control_gap_vs_qp <= th["qp_control"]
        checks["qp_value"] = report.qp_value_gap <= th["qp_value"] * cost_scale
    report.checks = checks
    return report
