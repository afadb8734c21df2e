"""Constructive solution via the cross-term-removing transformation.

Pipeline (``method="transform"``):

1. ``solve_H``: forward recursion ``H_0 = G0``,
   ``H_{k+1} = A^T H A + (A^T H B) R^{-1} (B^T H A)``.
2. ``transform_coefficients``: ``Cbar, Qbar, Rbar, etabar, rhobar`` and the hatted
   intermediate coefficients.
3. ``solve_riccati``: ``Sigma_N = 0``,
   ``Sigma_k = A Sigma_{k+1} Theta_k^{-1} A^T + B Rbar^{-1} B^T`` with
   ``Theta_k = I + Qbar Sigma_{k+1}``.
4. ``solve_phi``: backward equation for the offset process ``phi``.
5. ``forward_adjoint``: ``x_0 = (I + G0 Sigma_0)^{-1} G0 phi_0`` and the branch-wise
   forward rollout of ``x``.
6. ``recover_solution``: ``y = -Sigma x + phi``, ``ubar = K x + b`` and ``u`` from
   ``ubar`` by undoing the control substitution.
7. ``value_function``: closed-form value in three variants.

``method="direct"`` dispatches to :mod:`bslq.direct`, which decouples the
untransformed optimality system instead.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg as la

from . import _linalg
from .errors import NumericalError
from .problem import ProblemSpec, TreeProblem, broadcast, prepare
from .tree import AdaptedProcess, TreeSpace, children, cond_pair, expectation

log = logging.getLogger(__name__)

# Theta_k is declared singular above this condition number.
MAX_CONDITION = 1e12


class ValueVariant(str, enum.Enum):
    THEOREM = "theorem"
    DERIVATION = "derivation"
    COMPLETED = "completed"
    PAIRING = "pairing"


@dataclass(frozen=True, eq=False)
class TransformedCoefficients:
    H: tuple[np.ndarray, ...]
    Cbar: tuple[np.ndarray, ...]
    Qbar: tuple[np.ndarray, ...]
    Rbar: tuple[np.ndarray, ...]
    etabar: AdaptedProcess
    rhobar: AdaptedProcess
    Qhat: tuple[np.ndarray, ...]
    Shat: tuple[np.ndarray, ...]
    etahat: AdaptedProcess
    # R_k^{-1} (B_k^T H_k A_k + S_k): maps the martingale part of y_{k+1} into ubar - u
    control_shift: tuple[np.ndarray, ...]


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    Sigma: tuple[np.ndarray, ...]
    theta_lu: tuple[Any, ...] = field(repr=False)
    theta_condition: tuple[float, ...] = ()
    asymmetry: tuple[float, ...] = ()
    # Sigma_{k+1} Theta_k^{-1} before symmetrization, kept for diagnostics
    sigma_theta_inv: tuple[np.ndarray, ...] = field(default=(), repr=False)

    def theta_solve(self, k: int, rhs: np.ndarray) -> np.ndarray:
        """``Theta_k^{-1} rhs`` for ``rhs`` of shape ``(n,)`` or ``(n, r)``."""
        return la.lu_solve(self.theta_lu[k], rhs)

    def min_eigenvalues(self) -> list[float]:
        return [_linalg.min_eig(s) for s in self.Sigma]


@dataclass(frozen=True, eq=False)
class FeedbackSolution:
    method: str
    K: tuple[np.ndarray, ...]
    b: AdaptedProcess
    phi: AdaptedProcess
    x_star: AdaptedProcess
    y_star: AdaptedProcess
    ubar_star: AdaptedProcess
    u_star: AdaptedProcess
    value: float
    value_variant: ValueVariant
    values: dict[str, float]
    Sigma: tuple[np.ndarray, ...]
    H: tuple[np.ndarray, ...] | None = None
    transformed: TransformedCoefficients | None = field(default=None, repr=False)
    riccati: RiccatiSolution | None = field(default=None, repr=False)
    diagnostics: dict[str, Any] = field(default_factory=dict, repr=False)

    def replace(self, **changes) -> "FeedbackSolution":
        kw = dict(self.__dict__)
        kw.update(changes)
        return FeedbackSolution(**kw)


def _as_tree_problem(problem: ProblemSpec | TreeProblem, tree: TreeSpace | None = None) -> TreeProblem:
    if isinstance(problem, TreeProblem):
        return problem
    return broadcast(problem, tree)


def _cho(mat, stage, k):
    try:
        return la.cho_factor(_linalg.sym(mat))
    except la.LinAlgError as exc:
        raise NumericalError("matrix is not positive definite", stage, k) from exc


def solve_H(spec: ProblemSpec) -> tuple[np.ndarray, ...]:
    H = [_linalg.sym(spec.G0)]
    for k in range(spec.horizon):
        A, B, Hk = spec.A[k], spec.B[k], H[-1]
        cross = A.T @ Hk @ B
        nxt = A.T @ Hk @ A + cross @ la.cho_solve(_cho(spec.R[k], "H", k), cross.T)
        H.append(_linalg.sym(nxt))
    return tuple(H)


def transform_coefficients(problem: ProblemSpec | TreeProblem, H) -> TransformedCoefficients:
    tp = _as_tree_problem(problem)
    spec = tp.spec
    out: dict[str, list] = {name: [] for name in
                            ("Cbar", "Qbar", "Rbar", "Qhat", "Shat", "control_shift", "etabar", "rhobar", "etahat")}
    for k in range(spec.horizon):
        A, B, C, Q, S, R, Hk = (spec.A[k], spec.B[k], spec.C[k], spec.Q[k], spec.S[k], spec.R[k], H[k])
        Rinv = _linalg.spd_inverse(R)
        BtHA = B.T @ Hk @ A
        shift = Rinv @ (BtHA + S)
        Qbar = _linalg.sym(Q - S.T @ Rinv @ S)
        out["Cbar"].append(C - B @ shift)
        out["Qbar"].append(Qbar)
        out["Rbar"].append(_linalg.sym(R + B.T @ Hk @ B))
        out["Qhat"].append(_linalg.sym(Qbar + BtHA.T @ Rinv @ BtHA))
        out["Shat"].append(-BtHA)
        out["control_shift"].append(shift)
        q, eta, rho = tp.q[k], tp.eta[k], tp.rho[k]
        etahat = eta - rho @ shift
        out["etahat"].append(etahat)
        out["etabar"].append(etahat + q @ (Hk @ A))
        out["rhobar"].append(rho + q @ (Hk @ B))
    procs = {name: AdaptedProcess(out.pop(name)) for name in ("etabar", "rhobar", "etahat")}
    return TransformedCoefficients(H=tuple(H), **{k: tuple(v) for k, v in out.items()}, **procs)


def riccati_step(A, Qbar, Sigma_next, feed):
    """One backward step ``A Sigma Theta^{-1} A^T + feed``.

    Returns ``(Sigma_k before symmetrization, Sigma_next Theta^{-1}, lu(Theta), cond(Theta))``.
    """
    n = A.shape[0]
    theta = np.eye(n) + Qbar @ Sigma_next
    cond = float(np.linalg.cond(theta))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericalError("Theta is numerically singular", "riccati", None, cond)
    lu = la.lu_factor(theta)
    # Sigma Theta^{-1} = (Theta^{-T} Sigma)^T
    sti = la.lu_solve(lu, Sigma_next, trans=1).T
    return A @ sti @ A.T + feed, sti, lu, cond


def solve_riccati(problem: ProblemSpec | TreeProblem, tc: TransformedCoefficients) -> RiccatiSolution:
    spec = problem.spec if isinstance(problem, TreeProblem) else problem
    N, n = spec.horizon, spec.state_dim
    Sigma: list[np.ndarray] = [np.zeros((n, n))] * (N + 1)
    lus, conds, asym, stis = [None] * N, [0.0] * N, [0.0] * N, [None] * N
    for k in reversed(range(N)):
        B = spec.B[k]
        feed = B @ la.cho_solve(_cho(tc.Rbar[k], "riccati", k), B.T)
        try:
            raw, stis[k], lus[k], conds[k] = riccati_step(spec.A[k], tc.Qbar[k], Sigma[k + 1], feed)
        except NumericalError as exc:
            raise NumericalError("Theta is numerically singular", "riccati", k, exc.condition) from exc
        asym[k] = _linalg.asymmetry(raw)
        if asym[k] > 1e-12:
            log.debug("riccati k=%d asymmetry before symmetrization %.3e", k, asym[k])
        Sigma[k] = _linalg.sym(raw)
    return RiccatiSolution(tuple(Sigma), tuple(lus), tuple(conds), tuple(asym), tuple(stis))


def solve_phi(problem: ProblemSpec | TreeProblem, tc: TransformedCoefficients,
              ric: RiccatiSolution, tree: TreeSpace | None = None) -> AdaptedProcess:
    tp = _as_tree_problem(problem, tree)
    spec = tp.spec
    N = spec.horizon
    phi: list[np.ndarray] = [None] * (N + 1)
    phi[N] = np.array(tp.xi)
    for k in reversed(range(N)):
        A, B = spec.A[k], spec.B[k]
        sti = _linalg.sym(ric.sigma_theta_inv[k])
        drift, mart = cond_pair(phi[k + 1])
        f2 = A - A @ sti @ tc.Qbar[k]
        offset = tc.rhobar[k] @ la.cho_solve(_cho(tc.Rbar[k], "phi", k), B.T)
        # etabar_k is already F_{k-1}-measurable, so its conditional expectation is itself
        phi[k] = drift @ f2.T + mart @ tc.Cbar[k].T - tc.etabar[k] @ (A @ sti).T - offset + tp.q[k]
    return AdaptedProcess(phi)


def initial_adjoint(G0, Sigma0, phi0):
    n = G0.shape[0]
    lhs = np.eye(n) + G0 @ Sigma0
    cond = float(np.linalg.cond(lhs))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericalError("I + G0 Sigma_0 is numerically singular", "adjoint", 0, cond)
    return np.linalg.solve(lhs, G0 @ np.asarray(phi0).T).T


def forward_adjoint(problem: ProblemSpec | TreeProblem, tc: TransformedCoefficients,
                    ric: RiccatiSolution, phi: AdaptedProcess,
                    tree: TreeSpace | None = None) -> AdaptedProcess:
    tp = _as_tree_problem(problem, tree)
    spec = tp.spec
    x = [initial_adjoint(spec.G0, ric.Sigma[0], phi[0])]
    for k in range(spec.horizon):
        xk = x[k]
        drift, _ = cond_pair(phi[k + 1])
        base = xk @ spec.A[k] + drift @ tc.Qbar[k] + tc.etabar[k]
        vol = xk @ tc.Cbar[k]
        stacked = np.empty((2 * xk.shape[0], xk.shape[1]))
        stacked[0::2] = base + vol
        stacked[1::2] = base - vol
        x.append(ric.theta_solve(k, stacked.T).T)
    return AdaptedProcess(x)


def recover_solution(problem: ProblemSpec | TreeProblem, tc: TransformedCoefficients,
                     ric: RiccatiSolution, phi: AdaptedProcess, x_star: AdaptedProcess,
                     tree: TreeSpace | None = None,
                     value_variant: ValueVariant | str = ValueVariant.DERIVATION) -> FeedbackSolution:
    tp = _as_tree_problem(problem, tree)
    spec = tp.spec
    N = spec.horizon
    y = [-x_star[k] @ ric.Sigma[k] + phi[k] for k in range(N + 1)]
    K, b, ubar, u = [], [], [], []
    for k in range(N):
        cho = _cho(tc.Rbar[k], "recover", k)
        Kk = -la.cho_solve(cho, spec.B[k].T)
        bk = -la.cho_solve(cho, tc.rhobar[k].T).T
        ub = x_star[k] @ Kk.T + bk
        _, mart = cond_pair(y[k + 1])
        K.append(Kk)
        b.append(bk)
        ubar.append(ub)
        u.append(ub - mart @ tc.control_shift[k].T)
    values = {v.value: value_function(tp, tc, ric, phi, variant=v)
              for v in (ValueVariant.THEOREM, ValueVariant.DERIVATION, ValueVariant.COMPLETED)}
    variant = ValueVariant(value_variant)
    return FeedbackSolution(
        method="transform",
        K=tuple(K),
        b=AdaptedProcess(b),
        phi=phi,
        x_star=x_star,
        y_star=AdaptedProcess(y),
        ubar_star=AdaptedProcess(ubar),
        u_star=AdaptedProcess(u),
        value=values[variant.value],
        value_variant=variant,
        values=values,
        Sigma=ric.Sigma,
        H=tc.H,
        transformed=tc,
        riccati=ric,
        diagnostics=_diagnostics(tc.Rbar, ric),
    )


def value_function(problem: ProblemSpec | TreeProblem, tc: TransformedCoefficients,
                   ric: RiccatiSolution, phi: AdaptedProcess, tree: TreeSpace | None = None,
                   variant: ValueVariant | str = ValueVariant.DERIVATION) -> float:
    """Closed-form value.

    ``THEOREM`` is the literal closed form.  ``DERIVATION`` adds the per-step
    ``<H_k q_k, q_k>`` term.  ``COMPLETED`` is ``DERIVATION`` with the
    ``phi``-quadratic evaluated at ``e = E_{k-1}[phi_{k+1}]`` and the full
    cross term ``2 <(I - Qbar P) etabar, e>``, ``P = Sigma_{k+1} Theta_k^{-1}``;
    this is what telescoping ``<x_k, phi_k>`` along the decoupled system gives.
    """
    tp = _as_tree_problem(problem, tree)
    spec = tp.spec
    variant = ValueVariant(variant)
    if variant is ValueVariant.PAIRING:
        raise ValueError("the pairing variant belongs to the direct method")
    N = spec.horizon
    total = 0.0
    for k in range(N):
        Qb = tc.Qbar[k]
        P = _linalg.sym(ric.sigma_theta_inv[k])
        eb, rb = tc.etabar[k], tc.rhobar[k]
        if variant is ValueVariant.COMPLETED:
            e, _ = cond_pair(phi[k + 1])
            term = e @ (Qb - Qb @ P @ Qb) + 2.0 * (eb - eb @ P @ Qb)
            total += float(expectation(np.einsum("ij,ij->i", term, e)))
        else:
            # phi_{k+1} lives one level down; etabar_k is repeated onto both children
            p = phi[k + 1]
            term = p @ (Qb - Qb @ P @ Qb) + children(eb)
            total += float(expectation(np.einsum("ij,ij->i", term, p)))
        rb_solved = la.cho_solve(_cho(tc.Rbar[k], "value", k), rb.T).T
        step = -np.einsum("ij,ij->i", eb, eb @ P) - np.einsum("ij,ij->i", rb, rb_solved)
        if variant is not ValueVariant.THEOREM:
            qk = tp.q[k]
            step = step + np.einsum("ij,ij->i", qk @ tc.H[k], qk)
        total += float(expectation(step))
    xi = tp.xi
    total += float(expectation(np.einsum("ij,ij->i", xi @ tc.H[N], xi)))
    x0 = initial_adjoint(spec.G0, ric.Sigma[0], phi[0])
    total += float(expectation(np.einsum("ij,ij->i", x0, phi[0])))
    return 0.5 * total


def _diagnostics(Rbar, ric: RiccatiSolution) -> dict[str, Any]:
    return {
        "theta_condition": list(ric.theta_condition),
        "sigma_min_eigenvalue": ric.min_eigenvalues(),
        "sigma_asymmetry_before_symmetrization": list(ric.asymmetry),
        "sigma_theta_inv_asymmetry": [
            float(np.max(np.abs(s - s.T))) for s in ric.sigma_theta_inv
        ],
        "rbar_min_eigenvalue": [_linalg.min_eig(r) for r in Rbar],
    }


def solve_transform(spec: ProblemSpec, tree: TreeSpace | None = None,
                value_variant: ValueVariant | str = ValueVariant.DERIVATION) -> FeedbackSolution:
    stage = "H"
    try:
        H = solve_H(spec)
        stage = "transform"
        tp = broadcast(spec, tree)
        tc = transform_coefficients(tp, H)
        stage = "riccati"
        ric = solve_riccati(tp, tc)
        stage = "phi"
        phi = solve_phi(tp, tc, ric)
        stage = "adjoint"
        x = forward_adjoint(tp, tc, ric, phi)
        stage = "recover"
        sol = recover_solution(tp, tc, ric, phi, x, value_variant=value_variant)
    except NumericalError as exc:
        if exc.stage is None:
            raise NumericalError(str(exc), stage, exc.step, exc.condition) from exc
        raise
    sol.diagnostics["qbar_min_eigenvalue"] = [_linalg.min_eig(q) for q in tc.Qbar]
    return sol


def solve(spec: ProblemSpec, method: str = "transform", tree: TreeSpace | None = None,
          value_variant: ValueVariant | str | None = None) -> FeedbackSolution:
    """Validate ``spec`` and solve it end to end.

    ``method="transform"`` runs the transformation pipeline above; ``method="direct"``
    runs :func:`bslq.direct.solve_direct`.
    """
    spec = prepare(spec)
    if method == "transform":
        return solve_transform(spec, tree, value_variant or ValueVariant.DERIVATION)
    if method == "direct":
        from .direct import solve_direct

        return solve_direct(spec, tree)
    raise ValueError(f"unknown method {method!r}; expected 'transform' or 'direct'")
