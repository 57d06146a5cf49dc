"""Global assembly and Newmark time stepping.

Two element backends are supported:

``radial``
    coefficient matrices sampled along the rays, condensed per element; the
    interior station fields are carried from step to step.
``lowfreq``
    static stiffness and mass from the Riccati/Lyapunov equations with the
    boundary densities only.

For the radial backend the per-step work of every element (residual source,
forward sweep, backward recovery) is linear in the element state.  After
condensation the sweeps are applied once to identity blocks, which yields
three sparse operators reused at every step::

    w      = c0 X_u + c2 X_v + c3 X_a         (station state, all elements)
    rhs    = F w + f(t + dt)                  (effective sources, scattered)
    u      = A^-1 rhs                         (global solve, factorized once)
    X_u'   = R_g u + R_p w                    (interior recovery)
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coefficients import (
    DensityField,
    ElementGroup,
    RadialStations,
    assemble_coefficients,
    boundary_coefficients,
    group_elements,
)
from .condensation import TimeScheme, build_blocks, condense, recover_interior, sweep_rhs
from .lowfreq import effective_matrix_lowfreq, element_matrices
from .mesh import PolygonMesh

log = logging.getLogger(__name__)

BACKENDS = ("radial", "lowfreq")


class SolverError(RuntimeError):
    pass


def sine_burst(t, a0: float, f0: float, n_cycles: int):
    """Hann-windowed sine burst, zero outside ``[0, n_cycles / f0]``."""
    t = np.asarray(t, dtype=float)
    w = 2.0 * np.pi * f0
    inside = (t >= 0.0) & (t <= n_cycles / f0)
    return np.where(inside, a0 * np.sin(w * t) * np.sin(w * t / (2.0 * n_cycles)) ** 2, 0.0)


@dataclass(frozen=True)
class SourceSignal:
    node: int
    a0: float = 1e12
    f0: float = 5e5
    n_cycles: int = 2

    def __post_init__(self):
        if not np.isfinite(self.a0):
            raise ValueError("source amplitude must be finite")
        if not self.f0 > 0:
            raise ValueError("source frequency must be positive")
        if int(self.n_cycles) != self.n_cycles or self.n_cycles < 1:
            raise ValueError("cycle count must be a positive integer")

    def sample(self, times) -> np.ndarray:
        return sine_burst(times, self.a0, self.f0, self.n_cycles)


@dataclass(frozen=True)
class ReceiverArray:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=int)
        if len(np.unique(nodes)) != len(nodes):
            raise ValueError("receiver nodes must be unique")
        object.__setattr__(self, "nodes", nodes)

    def __len__(self):
        return len(self.nodes)


def snap_to_nodes(mesh: PolygonMesh, points, boundary_only: bool = True) -> tuple[np.ndarray, float]:
    """Nearest mesh node for each point (boundary nodes by default).

    Duplicates after snapping are dropped, keeping the first occurrence.
    Returns the node ids and the largest snap distance.
    """
    cand = mesh.boundary_nodes() if boundary_only else None
    ids, dmax = [], 0.0
    for p in points:
        node, d = mesh.nearest_node(p, cand)
        dmax = max(dmax, d)
        if node not in ids:
            ids.append(node)
    return np.array(ids, dtype=int), dmax


def edge_points(lo, hi, pitch: float) -> np.ndarray:
    """Points at ``pitch`` spacing around the rectangle ``lo``-``hi`` (corners once)."""
    (x0, y0), (x1, y1) = lo, hi
    nx = int(round((x1 - x0) / pitch))
    ny = int(round((y1 - y0) / pitch))
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    pts = [(x, y0) for x in xs[:-1]]
    pts += [(x1, y) for y in ys[:-1]]
    pts += [(x, y1) for x in xs[::-1][:-1]]
    pts += [(x0, y) for y in ys[::-1][:-1]]
    return np.array(pts)


def edge_receivers(mesh: PolygonMesh, pitch: float) -> ReceiverArray:
    lo, hi = mesh.bounding_box()
    nodes, dmax = snap_to_nodes(mesh, edge_points(lo, hi, pitch))
    log.info("snapped %d edge receivers, max snap distance %.3e m", len(nodes), dmax)
    return ReceiverArray(nodes)


@dataclass
class TraceSet:
    """Receiver recordings: ``data[source, step, receiver]``."""

    time: np.ndarray
    data: np.ndarray
    receivers: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.time) - 1

    @property
    def dt(self) -> float:
        return float(self.time[1] - self.time[0])

    def source(self, k: int) -> "TraceSet":
        return TraceSet(self.time, self.data[k : k + 1], self.receivers)


@dataclass
class GlobalSystem:
    n_nodes: int
    backend: str
    scheme: TimeScheme
    A: sp.csc_matrix
    lu: object
    F: sp.csr_matrix  # inertial source operator (N x nx)
    Rg: sp.csr_matrix | None  # station recovery from the boundary solution (nx x N)
    Rp: sp.csr_matrix | None  # station recovery from the state (nx x nx)
    weights: np.ndarray  # lumped nodal area weights
    asymmetry: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def n_station_dofs(self) -> int:
        return self.F.shape[1]

    def solve(self, rhs):
        with self._lock:
            x = self.lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError("global solve produced non-finite values")
        return x


def lumped_weights(mesh: PolygonMesh, groups: list[ElementGroup]) -> np.ndarray:
    w = np.zeros(mesh.n_nodes)
    for g in groups:
        np.add.at(w, g.node_ids, (g.areas / g.m)[:, None] * np.ones(g.m))
    return w


def _scatter_square(n_nodes, blocks_by_group):
    rows, cols, vals = [], [], []
    for ids, B in blocks_by_group:
        m = ids.shape[1]
        rows.append(np.repeat(ids, m, axis=1).ravel())
        cols.append(np.tile(ids, (1, m)).ravel())
        vals.append(B.reshape(len(ids), -1).ravel())
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_nodes, n_nodes)
    ).tocsc()


def _factorize(A):
    try:
        return spla.splu(A.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"global matrix is singular ({exc}); is the mesh connected?") from None


def _radial_group_operators(group: ElementGroup, field: DensityField, stations: RadialStations, scheme):
    """Condense one group and turn its sweeps into dense per-element operators."""
    cs = assemble_coefficients(group, field, stations)
    ce = condense(build_blocks(cs, scheme))
    E, m, n = len(group), group.m, stations.n
    K = (n + 1) * m
    xi2 = stations.xi**2
    # p = -xi_i^2 M0_i w_i written as columns over the stacked station vector w
    P = np.zeros((E, n + 1, m, K))
    for i in range(n + 1):
        P[:, i, :, i * m : (i + 1) * m] = -xi2[i] * cs.M0[:, i]
    f_hat, swept = sweep_rhs(ce, P)
    U_p = recover_interior(ce, np.zeros((E, m, K)), swept)
    U_g = recover_interior(ce, np.broadcast_to(np.eye(m), (E, m, m)).copy(), np.zeros((E, n + 3, m, m)))
    Rp = U_p[:, 1 : n + 2].reshape(E, K, K)
    Rg = U_g[:, 1 : n + 2].reshape(E, K, m)
    return ce.S, f_hat, Rp, Rg, ce.asymmetry()


def assemble_global(
    mesh: PolygonMesh,
    field: DensityField,
    scheme: TimeScheme,
    backend: str = "radial",
    stations: RadialStations | None = None,
    groups: list[ElementGroup] | None = None,
) -> GlobalSystem:
    """Assemble and factorize the global effective matrix for ``backend``."""
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    groups = groups if groups is not None else group_elements(mesh)
    N = mesh.n_nodes
    weights = lumped_weights(mesh, groups)

    if backend == "lowfreq":
        Ks, Ms = [], []
        for g in groups:
            E0, E1, E2, M0 = boundary_coefficients(g, field)
            KM = [element_matrices(E0[e], E1[e], E2[e], M0[e]) for e in range(len(g))]
            Ks.append((g.node_ids, np.array([effective_matrix_lowfreq(k, mm, scheme) for k, mm in KM])))
            Ms.append((g.node_ids, np.array([mm for _, mm in KM])))
        A = _scatter_square(N, Ks)
        M = _scatter_square(N, Ms).tocsr()
        return GlobalSystem(N, backend, scheme, A, _factorize(A), M, None, None, weights)

    if stations is None:
        raise ValueError("radial backend needs radial stations")
    blocks, F_parts, Rp_parts, Rg_parts = [], [], [], []
    offset = 0
    asym = 0.0
    for g in groups:
        S, Fh, Rp, Rg, a = _radial_group_operators(g, field, stations, scheme)
        asym = max(asym, a)
        E, m = len(g), g.m
        K = Fh.shape[-1]
        cols = offset + np.arange(E)[:, None] * K + np.arange(K)[None, :]  # (E, K)
        blocks.append((g.node_ids, S))
        F_parts.append((np.repeat(g.node_ids[:, :, None], K, axis=2), np.broadcast_to(cols[:, None, :], (E, m, K)), Fh))
        Rp_parts.append((np.broadcast_to(cols[:, :, None], (E, K, K)), np.broadcast_to(cols[:, None, :], (E, K, K)), Rp))
        Rg_parts.append((np.broadcast_to(cols[:, :, None], (E, K, m)), np.broadcast_to(g.node_ids[:, None, :], (E, K, m)), Rg))
        offset += E * K
    nx = offset

    def coo(parts, shape):
        r = np.concatenate([p[0].ravel() for p in parts])
        c = np.concatenate([p[1].ravel() for p in parts])
        v = np.concatenate([p[2].ravel() for p in parts])
        return sp.coo_matrix((v, (r, c)), shape=shape).tocsr()

    A = _scatter_square(N, blocks)
    return GlobalSystem(
        N,
        backend,
        scheme,
        A,
        _factorize(A),
        coo(F_parts, (N, nx)),
        coo(Rg_parts, (nx, N)),
        coo(Rp_parts, (nx, nx)),
        weights,
        asymmetry=asym,
    )


@dataclass
class WaveState:
    u: np.ndarray
    v: np.ndarray
    a: np.ndarray
    xu: np.ndarray | None = None  # station fields (radial backend)
    xv: np.ndarray | None = None
    xa: np.ndarray | None = None
    t: float = 0.0

    @staticmethod
    def zeros(system: GlobalSystem) -> "WaveState":
        N = system.n_nodes
        z = np.zeros
        if system.backend == "radial":
            nx = system.n_station_dofs
            return WaveState(z(N), z(N), z(N), z(nx), z(nx), z(nx))
        return WaveState(z(N), z(N), z(N))


def _newmark(u, v, a, u_new, scheme):
    beta, gamma, dt = scheme.beta, scheme.gamma, scheme.dt
    du = u_new - u
    v_new = gamma / (beta * dt) * du + (1.0 - gamma / beta) * v + dt * (1.0 - gamma / (2.0 * beta)) * a
    a_new = du / (beta * dt**2) - v / (beta * dt) + (1.0 - 1.0 / (2.0 * beta)) * a
    return v_new, a_new


def step(state: WaveState, system: GlobalSystem, forcing: np.ndarray) -> WaveState:
    """Advance one Newmark step; ``forcing`` is the nodal source at t + dt."""
    s = system.scheme
    # overflow surfaces as a non-finite solve and is reported there
    with np.errstate(over="ignore", invalid="ignore"):
        if system.backend == "radial":
            w = s.c0 * state.xu + s.c2 * state.xv + s.c3 * state.xa
        else:
            w = s.c0 * state.u + s.c2 * state.v + s.c3 * state.a
        u = system.solve(system.F @ w + forcing)
        v, a = _newmark(state.u, state.v, state.a, u, s)
        new = WaveState(u, v, a, t=state.t + s.dt)
        if system.backend == "radial":
            xu = system.Rg @ u + system.Rp @ w
            new.xu = xu
            new.xv, new.xa = _newmark(state.xu, state.xv, state.xa, xu, s)
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(a))):
        raise SolverError("time step produced non-finite velocity or acceleration")
    return new


def trapezoid_weights(nsteps: int, dt: float) -> np.ndarray:
    """Trapezoidal quadrature weights on ``nsteps + 1`` equally spaced samples."""
    w = np.full(nsteps + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def n_steps_for(T: float, dt: float) -> int:
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-6 * dt:
        raise ValueError(f"duration {T} is not a whole number of steps of {dt}")
    return n


@dataclass
class ForwardResult:
    traces: np.ndarray  # (steps+1, receivers)
    velocity: np.ndarray | None  # (steps+1, nodes), float32
    acceleration: np.ndarray | None = None
    displacement: np.ndarray | None = None


def run_source(
    system: GlobalSystem,
    nodes,
    values: np.ndarray,
    receivers: np.ndarray,
    keep_velocity: bool = True,
    keep_full: bool = False,
) -> ForwardResult:
    """Time-march with nodal sources ``values[step, k]`` applied at ``nodes[k]``.

    The state at step 0 is homogeneous; ``values[0]`` is not used.
    """
    nodes = np.atleast_1d(np.asarray(nodes, dtype=int))
    values = np.asarray(values, dtype=float).reshape(len(values), -1)
    nsteps = len(values) - 1
    state = WaveState.zeros(system)
    traces = np.zeros((nsteps + 1, len(receivers)))
    vel = np.zeros((nsteps + 1, system.n_nodes), dtype=np.float32) if keep_velocity else None
    full_u = np.zeros((nsteps + 1, system.n_nodes)) if keep_full else None
    full_a = np.zeros((nsteps + 1, system.n_nodes)) if keep_full else None
    f = np.zeros(system.n_nodes)
    for k in range(1, nsteps + 1):
        f[:] = 0.0
        np.add.at(f, nodes, values[k])
        state = step(state, system, f)
        traces[k] = state.u[receivers]
        if vel is not None:
            with np.errstate(over="ignore"):
                vel[k] = state.v
        if keep_full:
            full_u[k] = state.u
            full_a[k] = state.a
    return ForwardResult(traces, vel, full_a, full_u)


def run_forward(
    system: GlobalSystem,
    sources: list[SourceSignal],
    receivers: ReceiverArray,
    T: float,
    keep_velocity: bool = True,
    executor=None,
):
    """One forward solve per source.  Returns the traces and velocity histories."""
    dt = system.scheme.dt
    nsteps = n_steps_for(T, dt)
    times = dt * np.arange(nsteps + 1)

    def one(src):
        return run_source(system, [src.node], src.sample(times)[:, None], receivers.nodes, keep_velocity)

    results = list(executor.map(one, sources)) if executor is not None else [one(s) for s in sources]
    traces = TraceSet(times, np.stack([r.traces for r in results]), receivers.nodes)
    velocities = [r.velocity for r in results] if keep_velocity else None
    return traces, velocities
