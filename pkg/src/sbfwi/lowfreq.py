"""Low-frequency expansion element matrices (benchmark backend).

Static stiffness from the algebraic Riccati equation

    (K - E1) E0^-1 (K - E1^T) - E2 = 0

and mass from the Lyapunov equation

    (K - E1) E0^-1 M + M E0^-1 (K - E1^T) + 2 M - M0 = 0.

Both are valid only when the coefficient matrices do not vary along the
radial coordinate; with heterogeneous density the boundary values are used.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla


class LowFrequencyError(RuntimeError):
    pass


def _sym(A):
    return 0.5 * (A + A.T)


def solve_riccati(E0, E1, E2) -> np.ndarray:
    """Bounded-domain stiffness ``K`` of one element.

    The first-order form ``xi d/dxi [u; q] = Z [u; q]`` has eigenvalues in
    +/- pairs plus a double zero (constant field).  The stable subspace is
    spanned by the m-1 modes with positive real part and the constant mode
    ``[1; 0]``; ``K = Q_q Q_u^-1``.
    """
    # normalize by the material scale so both halves of Z are O(1)
    scale = np.linalg.norm(E0)
    E0 = np.asarray(E0, float) / scale
    E1 = np.asarray(E1, float) / scale
    E2 = np.asarray(E2, float) / scale
    m = E0.shape[0]
    E0inv_E1T = np.linalg.solve(E0, E1.T)
    E0inv = np.linalg.inv(E0)
    Z = np.block([[-E0inv_E1T, E0inv], [E2 - E1 @ E0inv_E1T, E1 @ E0inv]])
    # split between the (m-1)-th largest real part and the near-zero pair
    re = np.sort(np.linalg.eigvals(Z).real)[::-1]
    if not re[m - 2] > 10.0 * abs(re[m - 1]) + 1e-10:
        raise LowFrequencyError("positive modes not separated from the constant mode (degenerate element)")
    tau = 0.5 * (re[m - 2] + max(re[m - 1], 0.0))
    try:
        T, Q, sdim = sla.schur(Z, output="real", sort=lambda x, _y: x > tau)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise LowFrequencyError(f"Schur decomposition failed: {exc}") from None
    if sdim != m - 1:
        raise LowFrequencyError(f"expected {m - 1} positive modes, found {sdim} (degenerate element)")
    V = np.zeros((2 * m, m))
    V[:, : m - 1] = Q[:, : m - 1]
    V[:m, m - 1] = 1.0 / np.sqrt(m)
    Qu, Qq = V[:m], V[m:]
    try:
        K = np.linalg.solve(Qu.T, Qq.T).T
    except np.linalg.LinAlgError:
        raise LowFrequencyError("singular displacement block of the stable subspace") from None
    return scale * _sym(K)


def riccati_residual(K, E0, E1, E2) -> float:
    R = (K - E1) @ np.linalg.solve(E0, K - E1.T) - E2
    scale = np.linalg.norm(E2) + np.linalg.norm(K) ** 2 / np.linalg.norm(E0)
    return float(np.linalg.norm(R) / scale)


def solve_lyapunov(K, E0, E1, M0) -> np.ndarray:
    """Mass matrix from ``A M + M A^T = M0`` with ``A = (K - E1) E0^-1 + I``.

    Solved as the dense m^2 x m^2 Kronecker system.
    """
    m = K.shape[0]
    A = np.linalg.solve(E0.T, (K - E1).T).T + np.eye(m)
    I = np.eye(m)
    L = np.kron(I, A) + np.kron(A, I)
    try:
        vecM = np.linalg.solve(L, np.asarray(M0, float).reshape(-1, order="F"))
    except np.linalg.LinAlgError:
        raise LowFrequencyError("singular Lyapunov operator") from None
    return _sym(vecM.reshape(m, m, order="F"))


def lyapunov_residual(M, K, E0, E1, M0) -> float:
    A = (K - E1) @ np.linalg.inv(E0)
    R = A @ M + M @ A.T + 2 * M - M0
    return float(np.linalg.norm(R) / np.linalg.norm(M0))


def element_matrices(E0, E1, E2, M0):
    K = solve_riccati(E0, E1, E2)
    return K, solve_lyapunov(K, E0, E1, M0)


def effective_matrix_lowfreq(K, M, scheme) -> np.ndarray:
    """Newmark effective stiffness ``K + M / (beta dt^2)``; ``scheme=None`` gives K."""
    if scheme is None:
        return np.array(K, dtype=float)
    return K + scheme.c0 * M


def lowfreq_rhs(M, u, v, a, scheme) -> np.ndarray:
    """Inertial right-hand side carried over from the state at time t."""
    return M @ (scheme.c0 * u + scheme.c2 * v + scheme.c3 * a)
