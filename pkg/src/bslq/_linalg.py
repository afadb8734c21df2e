import numpy as np
import scipy.linalg as la

# Symmetry is checked in relative Frobenius norm; PSD and uniform positivity
# use eigenvalue thresholds scaled by max(1, ||M||_2).
TOL_SYM = 1e-9
TOL_PSD = 1e-10
TOL_UNIFORM = 1e-8


def sym(m):
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def asymmetry(m) -> float:
    """Relative Frobenius asymmetry ``||M - M^T|| / max(1, ||M||)``."""
    m = np.asarray(m, dtype=float)
    return float(np.linalg.norm(m - m.T) / max(1.0, np.linalg.norm(m)))


def scale(m) -> float:
    m = np.asarray(m, dtype=float)
    return max(1.0, float(np.linalg.norm(m, 2))) if m.size else 1.0


def min_eig(m) -> float:
    m = sym(m)
    return float(np.linalg.eigvalsh(m)[0]) if m.size else 0.0


def is_psd(m, tol: float = TOL_PSD) -> bool:
    return min_eig(m) >= -tol * scale(m)


def psd_sqrt_factor(m):
    """``D`` with ``D @ D.T == m`` for a PSD ``m``; negative eigenvalues are clamped to 0."""
    w, v = np.linalg.eigh(sym(m))
    return v * np.sqrt(np.clip(w, 0.0, None))


def spd_inverse(m):
    """Inverse of a small symmetric positive definite matrix via Cholesky."""
    c = la.cho_factor(sym(m))
    return sym(la.cho_solve(c, np.eye(m.shape[0])))
