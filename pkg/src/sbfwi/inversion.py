"""Waveform misfit, adjoint solves, density kernels and projected L-BFGS.

Adjoint convention: the adjoint field is produced by the forward solver
itself.  The weighted residual ``tw_k (d_k - u_k)`` is injected at all
receivers simultaneously in reversed order with a one-step shift
(source step ``i`` carries residual step ``N + 1 - i``); with that shift the
reversed run is the exact transpose of the discrete Newmark recursion.
The physical-time adjoint velocity at step ``k`` is then the adjoint run's
velocity at step ``N + 1 - k``.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .coefficients import RHO_MAX, RHO_MIN, CoefficientError, DensityField, RadialStations, group_elements
from .condensation import CondensationError, TimeScheme
from .io import write_misfit_history, write_snapshot
from .lowfreq import LowFrequencyError
from .mesh import PolygonMesh
from .transient import (
    GlobalSystem,
    ReceiverArray,
    SolverError,
    SourceSignal,
    TraceSet,
    assemble_global,
    lumped_weights,
    run_source,
    trapezoid_weights,
)

log = logging.getLogger(__name__)

SOLVER_ERRORS = (SolverError, CondensationError, CoefficientError, LowFrequencyError, np.linalg.LinAlgError)


class InversionError(RuntimeError):
    pass


@dataclass
class ModelVector:
    relative: np.ndarray
    rho0: float = 2700.0
    lo: float = RHO_MIN
    hi: float = RHO_MAX

    def __post_init__(self):
        self.relative = np.asarray(self.relative, dtype=float)
        if not self.lo < self.hi:
            raise ValueError("lower density bound must be below the upper bound")
        if np.any(self.relative < self.lo) or np.any(self.relative > self.hi):
            raise ValueError(f"model outside the box [{self.lo}, {self.hi}]")

    def project(self, x) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)

    @staticmethod
    def constant(n_nodes: int, value: float = 1.0, rho0: float = 2700.0) -> "ModelVector":
        return ModelVector(np.full(n_nodes, value), rho0)


def _weighted_energy(tw, r) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        E = 0.5 * float(np.einsum("t,tr->", tw, r**2))
    if not np.isfinite(E):
        raise SolverError("misfit overflowed; the trial model is numerically unstable")
    return E


def _check_pair(observed: TraceSet, synthetic: TraceSet):
    if observed.data.shape != synthetic.data.shape:
        raise ValueError(f"trace shapes differ: {observed.data.shape} vs {synthetic.data.shape}")
    if not np.array_equal(observed.receivers, synthetic.receivers):
        raise ValueError("observed and synthetic traces use different receivers")
    if not np.allclose(observed.time, synthetic.time, rtol=0, atol=1e-9 * observed.dt):
        raise ValueError("observed and synthetic traces use different time axes")


def residuals(observed: TraceSet, synthetic: TraceSet) -> np.ndarray:
    """``d - u`` per source, step and receiver."""
    _check_pair(observed, synthetic)
    return observed.data - synthetic.data


def misfit(observed: TraceSet, synthetic: TraceSet) -> float:
    """Half the time-integrated squared residual (trapezoidal rule)."""
    r = residuals(observed, synthetic)
    tw = trapezoid_weights(observed.n_steps, observed.dt)
    return 0.5 * float(np.einsum("t,str->", tw, r**2))


@dataclass
class AdjointState:
    """Velocity history of the reversed run (run order, float32)."""

    velocity: np.ndarray  # (N + 2, nodes)

    @property
    def n_steps(self) -> int:
        return len(self.velocity) - 2

    def physical_velocity(self) -> np.ndarray:
        """Adjoint velocity aligned with forward steps 0..N."""
        return self.velocity[::-1][: self.n_steps + 1]


def adjoint_sources(residual: np.ndarray, dt: float) -> np.ndarray:
    """Reversed, shifted and quadrature-weighted residual (N + 2 source steps)."""
    residual = np.asarray(residual, dtype=float)
    n = len(residual) - 1
    tw = trapezoid_weights(n, dt)
    s = np.zeros((n + 2,) + residual.shape[1:])
    s[1:] = (tw[:, None] * residual)[::-1]
    return s


def adjoint_solve(system: GlobalSystem, residual: np.ndarray, receivers) -> AdjointState:
    """Back-propagate one source's residual ``(N + 1, receivers)``."""
    s = adjoint_sources(residual, system.scheme.dt)
    res = run_source(system, receivers, s, np.zeros(0, dtype=int))
    return AdjointState(res.velocity)


def accumulate_kernel(forward_velocity, adjoint_velocity, dt: float) -> np.ndarray:
    """Zero-lag velocity correlation per node, both histories in physical time."""
    fv = np.asarray(forward_velocity)
    av = np.asarray(adjoint_velocity)
    if fv.shape != av.shape:
        raise ValueError(f"history shapes differ: {fv.shape} vs {av.shape}")
    tw = trapezoid_weights(len(fv) - 1, dt)
    return np.einsum("t,tj,tj->j", tw, fv.astype(float), av.astype(float))


@dataclass
class KernelAccumulator:
    values: np.ndarray
    weights: np.ndarray

    def add(self, k: np.ndarray) -> None:
        self.values = self.values + k


def gradient(kernel: KernelAccumulator, rho0: float) -> np.ndarray:
    """Nodal gradient with respect to the relative density."""
    return rho0 * kernel.weights * kernel.values


@dataclass
class Evaluation:
    E: float
    g: np.ndarray
    synthetic: TraceSet
    kernel: np.ndarray


class WaveformProblem:
    """Everything needed to evaluate misfit and gradient for a density model."""

    def __init__(
        self,
        mesh: PolygonMesh,
        scheme: TimeScheme,
        sources: list[SourceSignal],
        receivers: ReceiverArray,
        observed: TraceSet,
        backend: str = "radial",
        stations: RadialStations | None = None,
        rho0: float = 2700.0,
        c: float = 6000.0,
        threads: int = 1,
    ):
        if observed.data.shape[0] != len(sources):
            raise ValueError(f"observed data has {observed.data.shape[0]} sources, config has {len(sources)}")
        if not np.array_equal(observed.receivers, receivers.nodes):
            raise ValueError("observed traces were recorded at different receivers")
        if abs(observed.dt - scheme.dt) > 1e-9 * scheme.dt:
            raise ValueError(f"observed sampling {observed.dt} differs from the time step {scheme.dt}")
        self.mesh = mesh
        self.scheme = scheme
        self.sources = list(sources)
        self.receivers = receivers
        self.observed = observed
        self.backend = backend
        self.stations = stations
        self.rho0, self.c = rho0, c
        self.threads = max(1, int(threads))
        self.groups = group_elements(mesh)
        self.weights = lumped_weights(mesh, self.groups)
        self.n_evaluations = 0

    def system(self, relative) -> GlobalSystem:
        field_ = DensityField(relative, self.rho0, self.c)
        return assemble_global(mesh=self.mesh, field=field_, scheme=self.scheme, backend=self.backend,
                               stations=self.stations, groups=self.groups)

    def _per_source(self, system, k):
        src = self.sources[k]
        times = self.observed.time
        fwd = run_source(system, [src.node], src.sample(times)[:, None], self.receivers.nodes)
        r = self.observed.data[k] - fwd.traces
        tw = trapezoid_weights(len(times) - 1, self.scheme.dt)
        E = _weighted_energy(tw, r)
        adj = adjoint_solve(system, r, self.receivers.nodes)
        K = accumulate_kernel(fwd.velocity, adj.physical_velocity(), self.scheme.dt)
        return E, K, fwd.traces

    def evaluate(self, relative) -> Evaluation:
        system = self.system(relative)
        idx = range(len(self.sources))
        if self.threads > 1 and len(self.sources) > 1:
            with ThreadPoolExecutor(self.threads) as ex:
                parts = list(ex.map(lambda k: self._per_source(system, k), idx))
        else:
            parts = [self._per_source(system, k) for k in idx]
        # fixed reduction order keeps results independent of the thread count
        E = 0.0
        acc = KernelAccumulator(np.zeros(self.mesh.n_nodes), self.weights)
        for e, K, _ in parts:
            E += e
            acc.add(K)
        synthetic = TraceSet(self.observed.time, np.stack([p[2] for p in parts]), self.receivers.nodes)
        self.n_evaluations += 1
        return Evaluation(E, gradient(acc, self.rho0), synthetic, acc.values)

    def misfit_only(self, relative) -> float:
        system = self.system(relative)
        E = 0.0
        tw = trapezoid_weights(self.observed.n_steps, self.scheme.dt)
        for k, src in enumerate(self.sources):
            fwd = run_source(system, [src.node], src.sample(self.observed.time)[:, None], self.receivers.nodes,
                             keep_velocity=False)
            r = self.observed.data[k] - fwd.traces
            E += _weighted_energy(tw, r)
        return E


@dataclass
class OptimizerState:
    memory: int = 10
    lo: float = RHO_MIN
    hi: float = RHO_MAX
    armijo: float = 1e-4
    max_backtracks: int = 20
    initial_step: float = 0.1
    s: list = field(default_factory=list)
    y: list = field(default_factory=list)
    epoch: int = 0
    history: list = field(default_factory=list)

    def push(self, s, y) -> bool:
        sy = float(s @ y)
        if sy <= 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)) or sy <= 0:
            return False
        self.s.append(s)
        self.y.append(y)
        if len(self.s) > self.memory:
            self.s.pop(0)
            self.y.pop(0)
        return True


def _free_mask(x, g, lo, hi):
    """Variables not held at a bound by the gradient."""
    at_lo = (x <= lo) & (g > 0)
    at_hi = (x >= hi) & (g < 0)
    return ~(at_lo | at_hi)


def lbfgs_direction(g, s_list, y_list, initial_step=0.1):
    """Two-loop recursion; without pairs a steepest-descent step of max-norm ``initial_step``."""
    if not s_list:
        gmax = np.max(np.abs(g))
        return -g * (initial_step / gmax) if gmax > 0 else np.zeros_like(g)
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    s, y = s_list[-1], y_list[-1]
    r = q * ((s @ y) / (y @ y))
    for (s, y), (rho, a) in zip(zip(s_list, y_list), reversed(alphas)):
        b = rho * (y @ r)
        r += s * (a - b)
    return -r


@dataclass
class StepResult:
    x: np.ndarray
    E: float
    g: np.ndarray
    accepted: bool
    evaluation: object = None


def lbfgs_step(state: OptimizerState, x, E, g, objective: Callable) -> StepResult:
    """One projected L-BFGS update with Armijo backtracking.

    ``objective(x)`` returns an object with attributes ``E`` and ``g``.
    """
    x = np.asarray(x, float)
    free = _free_mask(x, g, state.lo, state.hi)
    gf = np.where(free, g, 0.0)
    if not np.any(gf):
        return StepResult(x, E, g, False)
    d = lbfgs_direction(gf, state.s, state.y, state.initial_step)
    d = np.where(free, d, 0.0)
    if gf @ d >= 0:
        # stale curvature pairs; restart from steepest descent
        state.s.clear()
        state.y.clear()
        d = lbfgs_direction(gf, [], [], state.initial_step)
    alpha = 1.0
    for _ in range(state.max_backtracks + 1):
        xt = np.clip(x + alpha * d, state.lo, state.hi)
        ev = objective(xt)
        if np.isfinite(ev.E) and ev.E <= E + state.armijo * float(g @ (xt - x)):
            state.push(xt - x, ev.g - g)
            return StepResult(xt, ev.E, ev.g, True, ev)
        alpha *= 0.5
    return StepResult(x, E, g, False)


@dataclass
class InversionResult:
    model: np.ndarray
    misfits: list
    status: str  # "max_epochs" | "converged" | "stagnation"
    models: list


def invert(
    problem: WaveformProblem,
    initial: ModelVector,
    max_epochs: int = 50,
    tolerance: float = 1e-6,
    optimizer: OptimizerState | None = None,
    output_dir=None,
    callback=None,
) -> InversionResult:
    """Epoch loop: evaluate, step, record.  Stops on the epoch cap, when the
    misfit falls to ``tolerance`` times its initial value, or when the line
    search stalls."""
    opt = optimizer or OptimizerState(lo=initial.lo, hi=initial.hi)
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        os.makedirs(out, exist_ok=True)
    x = initial.relative.copy()

    def trial(xt):
        try:
            return problem.evaluate(xt)
        except SOLVER_ERRORS as exc:
            log.info("trial model rejected: %s", exc)
            return Evaluation(np.inf, np.zeros_like(xt), None, None)

    ev = problem.evaluate(x)
    E, g = ev.E, ev.g
    misfits, models = [E], [x.copy()]
    E0 = E
    status = "max_epochs"

    def flush():
        if out is not None:
            write_snapshot(out / f"model_{len(models) - 1:03d}.csv", problem.mesh, models[-1])
            write_misfit_history(out / "misfit.csv", misfits)

    flush()
    log.info("epoch 0: E = %.6e", E)
    while opt.epoch < max_epochs:
        if E <= tolerance * E0:
            status = "converged"
            break
        step = lbfgs_step(opt, x, E, g, trial)
        if not step.accepted and opt.s:
            # the reduced kernel is approximate; retry once from steepest descent
            opt.s.clear()
            opt.y.clear()
            step = lbfgs_step(opt, x, E, g, trial)
        if not step.accepted:
            status = "stagnation"
            log.warning("line search failed at epoch %d", opt.epoch + 1)
            break
        opt.epoch += 1
        x, E, g = step.x, step.E, step.g
        misfits.append(E)
        models.append(x.copy())
        opt.history.append(E)
        flush()
        log.info("epoch %d: E = %.6e (%.4f)", opt.epoch, E, E / E0)
        if callback is not None:
            callback(opt.epoch, x, E)
    else:
        if E <= tolerance * E0:
            status = "converged"
    return InversionResult(x, misfits, status, models)
