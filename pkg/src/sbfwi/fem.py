"""Bilinear-quadrilateral FEM on structured rectangular grids.

Used to generate synthetic observations on a discretization unrelated to the
polygon meshes, and as the oracle for traces and gradients.  Density is
nodal and interpolated with the bilinear shape functions, so element
matrices are linear in the nodal densities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .condensation import TimeScheme
from .transient import SolverError, SourceSignal, TraceSet, n_steps_for, trapezoid_weights

_GP = np.array([-1.0, 1.0]) / np.sqrt(3.0)
# local node order: (-1,-1), (1,-1), (1,1), (-1,1)
_XI = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def _shape(s, t):
    N = 0.25 * (1 + _XI[:, 0] * s) * (1 + _XI[:, 1] * t)
    dN = 0.25 * np.stack([_XI[:, 0] * (1 + _XI[:, 1] * t), _XI[:, 1] * (1 + _XI[:, 0] * s)], axis=1)
    return N, dN


def quad_unit_tensors(coords):
    """Per-vertex unit-density stiffness and mass tensors of one quad.

    Returns ``GK, GM`` of shape (4, 4, 4): ``K = sum_k (rho c^2)_k GK[k]``.
    """
    coords = np.asarray(coords, float)
    GK = np.zeros((4, 4, 4))
    GM = np.zeros((4, 4, 4))
    for s in _GP:
        for t in _GP:
            N, dN = _shape(s, t)
            J = dN.T @ coords
            det = np.linalg.det(J)
            if det <= 0:
                raise ValueError("inverted or degenerate quadrilateral")
            grad = dN @ np.linalg.inv(J).T  # (4, 2)
            kk = grad @ grad.T * det
            mm = np.outer(N, N) * det
            GK += N[:, None, None] * kk
            GM += N[:, None, None] * mm
    return GK, GM


def quad_matrices(coords, rho_c2, rho):
    """4x4 stiffness and consistent mass with nodal coefficients (2x2 Gauss)."""
    GK, GM = quad_unit_tensors(coords)
    rc = np.broadcast_to(np.asarray(rho_c2, float), (4,))
    r = np.broadcast_to(np.asarray(rho, float), (4,))
    return np.einsum("k,kab->ab", rc, GK), np.einsum("k,kab->ab", r, GM)


@dataclass
class QuadMesh:
    width: float
    height: float
    nx: int
    ny: int
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs positive size and at least one cell per direction")

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def nodes(self) -> np.ndarray:
        X, Y = np.meshgrid(
            self.x0 + np.linspace(0, self.width, self.nx + 1), self.y0 + np.linspace(0, self.height, self.ny + 1)
        )
        return np.column_stack([X.ravel(), Y.ravel()])

    @property
    def cells(self) -> np.ndarray:
        i, j = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        n0 = (j * (self.nx + 1) + i).ravel()
        return np.column_stack([n0, n0 + 1, n0 + self.nx + 2, n0 + self.nx + 1])

    def cell_tensors(self):
        dx, dy = self.width / self.nx, self.height / self.ny
        return quad_unit_tensors(np.array([[0, 0], [dx, 0], [dx, dy], [0, dy]]))

    def nearest_node(self, point) -> int:
        i = int(round((point[0] - self.x0) / self.width * self.nx))
        j = int(round((point[1] - self.y0) / self.height * self.ny))
        return min(max(j, 0), self.ny) * (self.nx + 1) + min(max(i, 0), self.nx)


def disk_model(nodes, center, radius, inside=0.5, outside=1.0):
    """Relative density with a circular inclusion."""
    r = np.hypot(nodes[:, 0] - center[0], nodes[:, 1] - center[1])
    return np.where(r <= radius, inside, outside)


def inclusion_model(nodes, inclusions, background=1.0):
    """Background density with circular inclusions ``(center, radius, value)``; later ones win."""
    rel = np.full(len(nodes), float(background))
    for center, radius, value in inclusions:
        r = np.hypot(nodes[:, 0] - center[0], nodes[:, 1] - center[1])
        rel[r <= radius] = value
    return rel


class FEMSystem:
    """Assembled K, M and the factorized Newmark operator for one model."""

    def __init__(self, grid: QuadMesh, relative, scheme: TimeScheme, rho0=2700.0, c=6000.0):
        self.grid, self.scheme, self.rho0, self.c = grid, scheme, rho0, c
        rel = np.asarray(relative, float)
        if rel.shape != (grid.n_nodes,):
            raise ValueError(f"density needs {grid.n_nodes} nodal values, got {rel.shape}")
        self.relative = rel
        self.GK, self.GM = grid.cell_tensors()
        self.conn = grid.cells
        rho_cell = rho0 * rel[self.conn]  # (C, 4)
        Ke = c**2 * np.einsum("ck,kab->cab", rho_cell, self.GK)
        Me = np.einsum("ck,kab->cab", rho_cell, self.GM)
        N = grid.n_nodes
        r = np.repeat(self.conn, 4, axis=1).ravel()
        col = np.tile(self.conn, (1, 4)).ravel()
        self.K = sp.coo_matrix((Ke.ravel(), (r, col)), shape=(N, N)).tocsr()
        self.M = sp.coo_matrix((Me.ravel(), (r, col)), shape=(N, N)).tocsr()
        try:
            self.lu = spla.splu((self.K + scheme.c0 * self.M).tocsc())
        except RuntimeError as exc:
            raise SolverError(f"FEM factorization failed: {exc}") from None

    def march(self, nodes, values, keep=False):
        """Newmark march with nodal forcing ``values[step, k]`` at ``nodes[k]``.

        Returns the displacement history and, with ``keep``, the
        acceleration history as well.
        """
        s = self.scheme
        nodes = np.atleast_1d(np.asarray(nodes, int))
        values = np.asarray(values, float).reshape(len(values), -1)
        nsteps = len(values) - 1
        N = self.grid.n_nodes
        U = np.zeros((nsteps + 1, N))
        Acc = np.zeros((nsteps + 1, N)) if keep else None
        u, v, a = np.zeros(N), np.zeros(N), np.zeros(N)
        f = np.zeros(N)
        for k in range(1, nsteps + 1):
            f[:] = 0.0
            np.add.at(f, nodes, values[k])
            w = s.c0 * u + s.c2 * v + s.c3 * a
            un = self.lu.solve(self.M @ w + f)
            du = un - u
            v = s.gamma / (s.beta * s.dt) * du + (1 - s.gamma / s.beta) * v + s.dt * (1 - s.gamma / (2 * s.beta)) * a
            a = s.c0 * un - w
            u = un
            U[k] = u
            if keep:
                Acc[k] = a
        return U, Acc


def run_forward_fem(
    grid: QuadMesh,
    relative,
    sources: list[SourceSignal],
    receivers,
    scheme: TimeScheme,
    T: float,
    rho0=2700.0,
    c=6000.0,
) -> TraceSet:
    """Traces for each source; ``sources[k].node`` and ``receivers`` index grid nodes."""
    system = FEMSystem(grid, relative, scheme, rho0, c)
    nsteps = n_steps_for(T, scheme.dt)
    times = scheme.dt * np.arange(nsteps + 1)
    receivers = np.asarray(receivers, int)
    data = []
    for src in sources:
        U, _ = system.march([src.node], src.sample(times)[:, None])
        data.append(U[:, receivers])
    return TraceSet(times, np.stack(data), receivers)


def fem_misfit(system: FEMSystem, sources, receivers, observed: TraceSet) -> float:
    nsteps = observed.n_steps
    tw = trapezoid_weights(nsteps, system.scheme.dt)
    E = 0.0
    for k, src in enumerate(sources):
        U, _ = system.march([src.node], src.sample(observed.time)[:, None])
        r = U[:, receivers] - observed.data[k]
        E += 0.5 * float(np.sum(tw[:, None] * r**2))
    return E


def fem_gradient(
    grid: QuadMesh,
    relative,
    sources: list[SourceSignal],
    receivers,
    observed: TraceSet,
    scheme: TimeScheme,
    rho0=2700.0,
    c=6000.0,
):
    """Misfit and its exact gradient with respect to the nodal relative density.

    The adjoint is the transpose of the discrete Newmark recursion, so the
    result is the time-discrete counterpart of the full density kernel
    (velocity correlation and gradient-correlation terms together).
    Returns ``(E, g)``.
    """
    system = FEMSystem(grid, relative, scheme, rho0, c)
    s = scheme
    receivers = np.asarray(receivers, int)
    nsteps = observed.n_steps
    tw = trapezoid_weights(nsteps, s.dt)
    N = grid.n_nodes
    conn = system.conn
    gu = s.gamma / (s.beta * s.dt)
    gv = 1 - s.gamma / s.beta
    ga = s.dt * (1 - s.gamma / (2 * s.beta))
    E = 0.0
    PK = np.zeros((len(conn), 4, 4))  # sum_n z_e u_e^T
    PM = np.zeros((len(conn), 4, 4))  # sum_n z_e a_e^T
    for k, src in enumerate(sources):
        U, Acc = system.march([src.node], src.sample(observed.time)[:, None], keep=True)
        res = U[:, receivers] - observed.data[k]
        E += 0.5 * float(np.sum(tw[:, None] * res**2))
        dEdu = np.zeros((nsteps + 1, N))
        np.add.at(dEdu, (slice(None), receivers), tw[:, None] * res)
        lu_, lv, la = dEdu[nsteps].copy(), np.zeros(N), np.zeros(N)
        for n in range(nsteps, 0, -1):
            mu = lu_ + gu * lv + s.c0 * la
            z = system.lu.solve(mu, trans="T")
            ze = z[conn]
            PK += ze[:, :, None] * U[n][conn][:, None, :]
            PM += ze[:, :, None] * Acc[n][conn][:, None, :]
            Mz = system.M.T @ z
            lu_, lv, la = (
                s.c0 * Mz - gu * lv - s.c0 * la + dEdu[n - 1],
                s.c2 * Mz + gv * lv - s.c2 * la,
                s.c3 * Mz + ga * lv - s.c3 * la,
            )
    # dE/dr_j = -sum_n z^T (dK/dr_j u_n + dM/dr_j a_n)
    cell_g = -rho0 * (c**2 * np.einsum("kab,cab->ck", system.GK, PK) + np.einsum("kab,cab->ck", system.GM, PM))
    g = np.zeros(N)
    np.add.at(g, conn, cell_g)
    return E, g
