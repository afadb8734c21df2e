"""Decoupling of the untransformed optimality system.

The stationarity condition ``B^T x + S d + R u + rho = 0`` (``d = E_{k-1}[y_{k+1}]``)
eliminates the control; the remaining forward-backward system in ``(x, y)`` is
decoupled by ``y_k = -Sigma_k x_k + phi_k`` with

    Atil   = A - B R^{-1} S
    Qbar   = Q - S^T R^{-1} S
    etatil = eta - S^T R^{-1} rho
    Sigma_k = Atil Sigma_{k+1} Theta_k^{-1} Atil^T + C Sigma_{k+1} C^T + B R^{-1} B^T,
    Theta_k = I + Qbar Sigma_{k+1},   Sigma_N = 0.

The ``C Sigma C^T`` term is what the martingale component of ``y`` contributes
through the noise-driven part of the adjoint.  The forward adjoint is the
original one, ``x_{k+1} = A^T x + Q d + S^T u + eta + w_k C^T x``, started at
``x_0 = (I + G0 Sigma_0)^{-1} G0 phi_0``.  The feedback law is
``u_k = K_k x_k + b_k`` with an adapted offset ``b``.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as la

from . import _linalg
from .errors import NumericalError
from .problem import ProblemSpec, TreeProblem, broadcast
from .solver import (
    FeedbackSolution,
    RiccatiSolution,
    ValueVariant,
    _cho,
    initial_adjoint,
    riccati_step,
)
from .tree import AdaptedProcess, TreeSpace, cond_pair, expectation


def reduced_coefficients(spec: ProblemSpec):
    """Per-step ``(Atil, Qbar, R^{-1}, cho(R))`` with the control cross term removed."""
    out = []
    for k in range(spec.horizon):
        cho = _cho(spec.R[k], "direct", k)
        Rinv = _linalg.sym(la.cho_solve(cho, np.eye(spec.control_dim)))
        Atil = spec.A[k] - spec.B[k] @ Rinv @ spec.S[k]
        Qbar = _linalg.sym(spec.Q[k] - spec.S[k].T @ Rinv @ spec.S[k])
        out.append((Atil, Qbar, Rinv))
    return out


def solve_sigma(spec: ProblemSpec, reduced=None) -> RiccatiSolution:
    reduced = reduced or reduced_coefficients(spec)
    N, n = spec.horizon, spec.state_dim
    Sigma = [np.zeros((n, n))] * (N + 1)
    lus, conds, asym, stis = [None] * N, [0.0] * N, [0.0] * N, [None] * N
    for k in reversed(range(N)):
        Atil, Qbar, Rinv = reduced[k]
        B, C = spec.B[k], spec.C[k]
        feed = C @ Sigma[k + 1] @ C.T + B @ Rinv @ B.T
        try:
            raw, stis[k], lus[k], conds[k] = riccati_step(Atil, Qbar, Sigma[k + 1], feed)
        except NumericalError as exc:
            raise NumericalError("Theta is numerically singular", "riccati", k, exc.condition) from exc
        asym[k] = _linalg.asymmetry(raw)
        Sigma[k] = _linalg.sym(raw)
    return RiccatiSolution(tuple(Sigma), tuple(lus), tuple(conds), tuple(asym), tuple(stis))


def solve_offset(tp: TreeProblem, reduced, ric: RiccatiSolution) -> AdaptedProcess:
    spec = tp.spec
    N = spec.horizon
    phi = [None] * (N + 1)
    phi[N] = np.array(tp.xi)
    for k in reversed(range(N)):
        Atil, Qbar, Rinv = reduced[k]
        P = _linalg.sym(ric.sigma_theta_inv[k])
        etatil = tp.eta[k] - tp.rho[k] @ Rinv @ spec.S[k]
        drift, mart = cond_pair(phi[k + 1])
        inner = drift - drift @ (P @ Qbar).T - etatil @ P
        phi[k] = inner @ Atil.T + mart @ spec.C[k].T - tp.rho[k] @ (spec.B[k] @ Rinv).T + tp.q[k]
    return AdaptedProcess(phi)


def solve_direct(spec: ProblemSpec, tree: TreeSpace | None = None) -> FeedbackSolution:
    """Solve an already validated and symmetrized ``spec``."""
    tp = broadcast(spec, tree)
    N, n = spec.horizon, spec.state_dim
    reduced = reduced_coefficients(spec)
    ric = solve_sigma(spec, reduced)
    phi = solve_offset(tp, reduced, ric)

    x = [initial_adjoint(spec.G0, ric.Sigma[0], phi[0])]
    K, b, u, d_all = [], [], [], []
    for k in range(N):
        Atil, Qbar, Rinv = reduced[k]
        A, B, C, Q, S = spec.A[k], spec.B[k], spec.C[k], spec.Q[k], spec.S[k]
        P = _linalg.sym(ric.sigma_theta_inv[k])
        etatil = tp.eta[k] - tp.rho[k] @ Rinv @ S
        drift, _ = cond_pair(phi[k + 1])
        # d_k = E_{k-1}[y_{k+1}] = -P Atil^T x_k + (I - P Qbar) E phi_{k+1} - P etatil
        d_offset = drift - drift @ (P @ Qbar).T - etatil @ P
        Kk = -Rinv @ (B.T - S @ P @ Atil.T)
        bk = -(d_offset @ S.T + tp.rho[k]) @ Rinv
        xk = x[k]
        dk = -xk @ (P @ Atil.T).T + d_offset
        uk = xk @ Kk.T + bk
        base = xk @ A + dk @ Q + uk @ S + tp.eta[k]
        vol = xk @ C
        nxt = np.empty((2 * xk.shape[0], n))
        nxt[0::2] = base + vol
        nxt[1::2] = base - vol
        K.append(Kk)
        b.append(bk)
        u.append(uk)
        d_all.append(dk)
        x.append(nxt)

    x_star = AdaptedProcess(x)
    y_star = AdaptedProcess(-xk @ ric.Sigma[k] + phi[k] for k, xk in enumerate(x_star.values))
    u_star = AdaptedProcess(u)
    value = pairing_value(tp, x_star, AdaptedProcess(d_all), u_star)
    diagnostics = {
        "theta_condition": list(ric.theta_condition),
        "sigma_min_eigenvalue": ric.min_eigenvalues(),
        "sigma_asymmetry_before_symmetrization": list(ric.asymmetry),
    }
    return FeedbackSolution(
        method="direct",
        K=tuple(K),
        b=AdaptedProcess(b),
        phi=phi,
        x_star=x_star,
        y_star=y_star,
        ubar_star=u_star,
        u_star=u_star,
        value=value,
        value_variant=ValueVariant.PAIRING,
        values={ValueVariant.PAIRING.value: value},
        Sigma=ric.Sigma,
        riccati=ric,
        diagnostics=diagnostics,
    )


def pairing_value(tp: TreeProblem, x: AdaptedProcess, d: AdaptedProcess, u: AdaptedProcess) -> float:
    """Optimal cost from the first-order conditions.

    At a stationary point the quadratic part of the cost equals minus half its
    linear part, which leaves
    ``1/2 E{ sum_k [<x_k, q_k> + <eta_k, d_k> + <rho_k, u_k>] + <x_N, xi> }``.
    """
    N = tp.spec.horizon
    total = 0.0
    for k in range(N):
        step = (np.einsum("ij,ij->i", x[k], tp.q[k])
                + np.einsum("ij,ij->i", d[k], tp.eta[k])
                + np.einsum("ij,ij->i", u[k], tp.rho[k]))
        total += float(expectation(step))
    total += float(expectation(np.einsum("ij,ij->i", x[N], tp.xi)))
    return 0.5 * total
