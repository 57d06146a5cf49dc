"""Radial finite differences, block-tridiagonal condensation and recovery.

Block rows are stored with an offset of one: array index ``j`` holds radial
row ``i = j - 1``, so ``j = 0`` is the ghost row at the scaling center and
``j = n + 2`` the ghost row on the boundary.  All arrays may carry leading
batch axes (one per element); right-hand sides may additionally carry a
trailing column axis, which is how the transient solver turns the sweeps
into linear operators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coefficients import CoefficientSet


class CondensationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeScheme:
    dt: float
    beta: float = 0.25
    gamma: float = 0.5

    def __post_init__(self):
        if not 0 < self.dt < 1e100:
            raise ValueError(f"time step must be positive and finite, got {self.dt}")
        if not self.beta > 0:
            raise ValueError(f"Newmark beta must be positive, got {self.beta}")
        if not 0.5 <= self.gamma <= 1.0:
            raise ValueError(f"Newmark gamma must lie in [1/2, 1], got {self.gamma}")

    @property
    def c0(self) -> float:
        return 1.0 / (self.beta * self.dt**2)

    @property
    def c2(self) -> float:
        return 1.0 / (self.beta * self.dt)

    @property
    def c3(self) -> float:
        return 1.0 / (2.0 * self.beta) - 1.0


@dataclass
class BlockTridiagonalSystem:
    theta: np.ndarray  # (..., n+3, m, m) sub-diagonal blocks
    phi: np.ndarray  # diagonal blocks
    psi: np.ndarray  # super-diagonal blocks
    h: float

    @property
    def n(self) -> int:
        return self.phi.shape[-3] - 3

    @property
    def m(self) -> int:
        return self.phi.shape[-1]


@dataclass
class CondensedElement:
    S: np.ndarray  # (..., m, m)
    pivots: np.ndarray  # (..., n+3, m, m); index 0 unused
    phi: np.ndarray  # swept diagonal blocks
    psi: np.ndarray  # swept super-diagonal blocks
    theta_ghost: np.ndarray  # (..., m, m) theta_{-1}
    phi_ghost: np.ndarray  # original phi_{-1}
    psi_ghost: np.ndarray  # original psi_{-1}

    @property
    def n(self) -> int:
        return self.phi.shape[-3] - 3

    @property
    def batch_ndim(self) -> int:
        return self.S.ndim - 2

    def asymmetry(self) -> float:
        S = self.S
        num = np.linalg.norm(S - np.swapaxes(S, -1, -2), axis=(-2, -1))
        return float(np.max(num / np.linalg.norm(S, axis=(-2, -1))))


@dataclass
class ElementState:
    """Station fields of one element (or a batch), stations 0..n."""

    u: np.ndarray
    v: np.ndarray
    a: np.ndarray

    @staticmethod
    def zeros(shape) -> "ElementState":
        return ElementState(np.zeros(shape), np.zeros(shape), np.zeros(shape))


def _t(A):
    return np.swapaxes(A, -1, -2)


def _right_solve(B, A):
    """``B @ inv(A)`` without forming the inverse."""
    return _t(np.linalg.solve(_t(A), _t(B)))


def _mv(A, x):
    """Batched matrix-(vector or matrix) product for trailing (m,) or (m, k)."""
    return A @ x


def build_blocks(cs: CoefficientSet, scheme: TimeScheme | None) -> BlockTridiagonalSystem:
    """Assemble the radial block rows.  ``scheme=None`` drops the mass term (static)."""
    xi = cs.stations.xi
    h = cs.stations.h
    n = cs.stations.n
    E0, E1, E2, M0, dE0, dE1 = cs.E0, cs.E1, cs.E2, cs.M0, cs.dE0, cs.dE1
    E1T = _t(E1)
    x = xi[:, None, None]
    c0 = 0.0 if scheme is None else scheme.c0

    first = x**2 * E0 / h**2
    drift = x * (E0 + E1T - E1 + x * dE0) / (2.0 * h)
    shape = E0.shape[:-3] + (n + 3,) + E0.shape[-2:]
    theta = np.zeros(shape)
    phi = np.zeros(shape)
    psi = np.zeros(shape)
    theta[..., 1 : n + 2, :, :] = first - drift
    phi[..., 1 : n + 2, :, :] = -2.0 * first - E2 + x * _t(dE1) - c0 * x**2 * M0
    psi[..., 1 : n + 2, :, :] = first + drift

    theta[..., 0, :, :] = -xi[0] * E0[..., 0, :, :] / (2.0 * h)
    phi[..., 0, :, :] = E1T[..., 0, :, :]
    psi[..., 0, :, :] = xi[0] * E0[..., 0, :, :] / (2.0 * h)
    theta[..., n + 2, :, :] = -xi[n] * E0[..., n, :, :] / (2.0 * h)
    phi[..., n + 2, :, :] = E1T[..., n, :, :]
    psi[..., n + 2, :, :] = xi[n] * E0[..., n, :, :] / (2.0 * h)
    return BlockTridiagonalSystem(theta, phi, psi, h)


def central_difference(u_prev, u, u_next, h):
    """First and second central differences at the middle station."""
    d1 = (np.asarray(u_next) - np.asarray(u_prev)) / (2.0 * h)
    d2 = (np.asarray(u_prev) - 2.0 * np.asarray(u) + np.asarray(u_next)) / h**2
    return d1, d2


def residual_source(state: ElementState, cs: CoefficientSet, scheme: TimeScheme) -> np.ndarray:
    """Source blocks p_0..p_n generated by the known state at time t."""
    xi = cs.stations.xi
    beta, dt = scheme.beta, scheme.dt
    w = state.u / (beta * dt**2) + state.v / (beta * dt) - (1.0 - 1.0 / (2.0 * beta)) * state.a
    return -(xi[:, None] ** 2) * np.einsum("...ab,...b->...a", cs.M0, w)


def condense(system: BlockTridiagonalSystem) -> CondensedElement:
    """Eliminate the sub-diagonal with the block Thomas algorithm.

    Returns the element dynamic stiffness together with the pivots and swept
    blocks needed for right-hand-side sweeps and interior recovery.
    """
    n = system.n
    theta, psi = system.theta, system.psi.copy()
    phi = system.phi.copy()
    pivots = np.zeros_like(phi)

    def solve_or_fail(B, A, station):
        try:
            return _right_solve(B, A)
        except np.linalg.LinAlgError:
            raise CondensationError(f"singular pivot block at radial station {station}") from None

    # row 0 uses the centre ghost row (three-block row) as its pivot
    r = solve_or_fail(theta[..., 1, :, :], theta[..., 0, :, :], -1)
    pivots[..., 1, :, :] = r
    phi[..., 1, :, :] = phi[..., 1, :, :] - r @ phi[..., 0, :, :]
    psi[..., 1, :, :] = psi[..., 1, :, :] - r @ psi[..., 0, :, :]

    for j in range(2, n + 2):
        r = solve_or_fail(theta[..., j, :, :], phi[..., j - 1, :, :], j - 2)
        pivots[..., j, :, :] = r
        phi[..., j, :, :] = phi[..., j, :, :] - r @ psi[..., j - 1, :, :]

    # boundary ghost row couples to station n-1
    r = solve_or_fail(theta[..., n + 2, :, :], phi[..., n, :, :], n - 1)
    pivots[..., n + 2, :, :] = r
    phi[..., n + 2, :, :] = phi[..., n + 2, :, :] - r @ psi[..., n, :, :]

    psi_n = psi[..., n + 1, :, :]
    try:
        S = phi[..., n + 2, :, :] - psi[..., n + 2, :, :] @ np.linalg.solve(psi_n, phi[..., n + 1, :, :])
    except np.linalg.LinAlgError:
        raise CondensationError(f"singular super-diagonal block at radial station {n}") from None
    return CondensedElement(
        S=S,
        pivots=pivots,
        phi=phi,
        psi=psi,
        theta_ghost=system.theta[..., 0, :, :],
        phi_ghost=system.phi[..., 0, :, :],
        psi_ghost=system.psi[..., 0, :, :],
    )


def _as_columns(ce: CondensedElement, x, station_axis: bool):
    """Add a trailing column axis to vector right-hand sides."""
    x = np.asarray(x, dtype=float)
    base = ce.batch_ndim + (2 if station_axis else 1)
    if x.ndim == base:
        return x[..., None], True
    return x, False


def sweep_rhs(ce: CondensedElement, p, f=None):
    """Forward sweep of the source blocks.

    ``p`` holds stations 0..n (shape (..., n+1, m) or (..., n+1, m, k)).
    Returns ``(f_hat, p_swept)`` where ``p_swept`` covers block rows
    -1..n+1 (n+3 entries).
    """
    n = ce.n
    P, vec = _as_columns(ce, p, True)
    swept = np.zeros(P.shape[:-3] + (n + 3,) + P.shape[-2:])
    swept[..., 1 : n + 2, :, :] = P
    for j in range(2, n + 2):
        swept[..., j, :, :] -= ce.pivots[..., j, :, :] @ swept[..., j - 1, :, :]
    swept[..., n + 2, :, :] = -ce.pivots[..., n + 2, :, :] @ swept[..., n, :, :]
    psi_n = ce.psi[..., n + 1, :, :]
    f_hat = swept[..., n + 2, :, :] - ce.psi[..., n + 2, :, :] @ np.linalg.solve(psi_n, swept[..., n + 1, :, :])
    if f is not None:
        F, _ = _as_columns(ce, f, False)
        f_hat = f_hat + F
    if vec:
        return f_hat[..., 0], swept[..., 0]
    return f_hat, swept


def recover_interior(ce: CondensedElement, u_n, p_swept):
    """Backward sweep: fields on rows -1..n+1 given the boundary solution."""
    n = ce.n
    Un, vec = _as_columns(ce, u_n, False)
    P = np.asarray(p_swept, dtype=float)
    if vec:
        P = P[..., None]
    U = np.zeros(P.shape)
    U[..., n + 1, :, :] = Un
    U[..., n + 2, :, :] = np.linalg.solve(
        ce.psi[..., n + 1, :, :], P[..., n + 1, :, :] - ce.phi[..., n + 1, :, :] @ Un
    )
    for j in range(n, 0, -1):
        U[..., j, :, :] = np.linalg.solve(
            ce.phi[..., j, :, :], P[..., j, :, :] - ce.psi[..., j, :, :] @ U[..., j + 1, :, :]
        )
    U[..., 0, :, :] = np.linalg.solve(
        ce.theta_ghost, -ce.phi_ghost @ U[..., 1, :, :] - ce.psi_ghost @ U[..., 2, :, :]
    )
    return U[..., 0] if vec else U


def update_time_derivatives(state: ElementState, u_new, scheme: TimeScheme) -> ElementState:
    beta, gamma, dt = scheme.beta, scheme.gamma, scheme.dt
    du = u_new - state.u
    v = gamma / (beta * dt) * du + (1.0 - gamma / beta) * state.v + dt * (1.0 - gamma / (2.0 * beta)) * state.a
    a = du / (beta * dt**2) - state.v / (beta * dt) + (1.0 - 1.0 / (2.0 * beta)) * state.a
    return ElementState(np.array(u_new, dtype=float), v, a)


def dense_system(system: BlockTridiagonalSystem, p, f):
    """Full (n+3)m matrix and right-hand side of one element (verification aid)."""
    n, m = system.n, system.m
    size = (n + 3) * m
    A = np.zeros((size, size))

    def put(row, col, block):
        A[row * m : (row + 1) * m, col * m : (col + 1) * m] += block

    put(0, 0, system.theta[0])
    put(0, 1, system.phi[0])
    put(0, 2, system.psi[0])
    for j in range(1, n + 2):
        put(j, j - 1, system.theta[j])
        put(j, j, system.phi[j])
        put(j, j + 1, system.psi[j])
    put(n + 2, n, system.theta[n + 2])
    put(n + 2, n + 1, system.phi[n + 2])
    put(n + 2, n + 2, system.psi[n + 2])
    rhs = np.zeros(size)
    rhs[m : (n + 2) * m] = np.asarray(p).ravel()
    rhs[(n + 2) * m :] = f
    return A, rhs
