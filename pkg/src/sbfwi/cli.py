"""Command-line entry point: ``sbfwi <subcommand> CONFIG``.

Subcommands: synthesize, forward, invert, kernel, mesh-info.
Exit codes: 0 success, 2 configuration/input error, 3 solver error,
4 optimizer stagnation.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .coefficients import CoefficientError, DensityField, RadialStations
from .condensation import CondensationError, TimeScheme
from .config import ConfigError, RunConfig, load_config, preset_path
from .fem import QuadMesh, inclusion_model, run_forward_fem
from .inversion import ModelVector, OptimizerState, WaveformProblem, invert
from .io import ensure_dir, read_snapshot, read_trace_set, write_nodal_field, write_traces
from .lowfreq import LowFrequencyError
from .mesh import MeshError, mesh_statistics, read_mesh_file
from .transient import (
    ReceiverArray,
    SolverError,
    SourceSignal,
    TraceSet,
    assemble_global,
    edge_points,
    run_forward,
    snap_to_nodes,
)

log = logging.getLogger("sbfwi")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_STAGNATION = 0, 2, 3, 4
THREADS_ENV = "SBFWI_THREADS"
SOLVER_ERRORS = (SolverError, CondensationError, LowFrequencyError, CoefficientError, np.linalg.LinAlgError)


def thread_count(cfg: RunConfig) -> int:
    env = os.environ.get(THREADS_ENV)
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}: expected an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError(f"{THREADS_ENV}: must be at least 1")
        return n
    if cfg.threads is not None:
        return cfg.threads
    return os.cpu_count() or 1


class Experiment:
    """Mesh, sources, receivers and solver settings built from a config."""

    def __init__(self, cfg: RunConfig, threads: int | None = None):
        self.cfg = cfg
        mesh_path = cfg.resolve(cfg.mesh)
        try:
            self.mesh = read_mesh_file(mesh_path)
        except OSError as exc:
            raise ConfigError(f"mesh: cannot read {mesh_path}: {exc.strerror}") from None
        self.scheme = TimeScheme(cfg.dt, cfg.beta, cfg.gamma)
        self.stations = RadialStations(cfg.n, cfg.xi0) if cfg.backend == "radial" else None
        if self.stations is not None and cfg.n < 5:
            log.warning("radial.n = %d: fewer than 5 intervals may leave the inversion in a local minimum", cfg.n)
        self.threads = threads if threads is not None else thread_count(cfg)
        self.sources = []
        for k, s in enumerate(cfg.sources):
            node, d = snap_to_nodes(self.mesh, [s.position])
            log.info("source %d snapped to node %d (distance %.3e m)", k, node[0], d)
            self.sources.append(SourceSignal(int(node[0]), s.a0, s.f0, s.n_cycles))
        self.receivers = self._receivers()

    def _receivers(self) -> ReceiverArray:
        rc = self.cfg.receivers
        if rc.nodes is not None:
            nodes = np.array(rc.nodes, dtype=int)
            if nodes.max() >= self.mesh.n_nodes:
                raise ConfigError(f"receivers.nodes: node {nodes.max()} not in mesh ({self.mesh.n_nodes} nodes)")
        else:
            lo, hi = self.mesh.bounding_box()
            nodes, d = snap_to_nodes(self.mesh, edge_points(lo, hi, rc.edge_pitch))
            log.info("%d edge receivers, max snap distance %.3e m", len(nodes), d)
        if rc.exclude_sources:
            nodes = np.array([n for n in nodes if n not in {s.node for s in self.sources}], dtype=int)
        if len(nodes) == 0:
            raise ConfigError("receivers: no receiver nodes left")
        return ReceiverArray(nodes)

    @property
    def output(self) -> Path:
        return ensure_dir(self.cfg.resolve(self.cfg.output))

    def times(self) -> np.ndarray:
        return self.cfg.dt * np.arange(round(self.cfg.T / self.cfg.dt) + 1)

    def initial_model(self) -> ModelVector:
        init = self.cfg.initial_model
        lo, hi = self.cfg.optimizer.bounds
        if isinstance(init, str):
            rel = read_snapshot(self.cfg.resolve(init), self.mesh.n_nodes)
        else:
            rel = np.full(self.mesh.n_nodes, float(init))
        try:
            return ModelVector(rel, self.cfg.rho0, lo, hi)
        except ValueError as exc:
            raise ConfigError(f"initial_model: {exc}") from None

    def oracle_grid(self) -> QuadMesh:
        if self.cfg.oracle is None:
            raise ConfigError("oracle: section required for synthesize")
        lo, hi = self.mesh.bounding_box()
        o = self.cfg.oracle
        return QuadMesh(hi[0] - lo[0], hi[1] - lo[1], o.nx, o.ny, lo[0], lo[1])

    def oracle_model(self, grid: QuadMesh) -> np.ndarray:
        o = self.cfg.oracle
        return inclusion_model(grid.nodes, [(i.center, i.radius, i.value) for i in o.inclusions], o.background)

    def synthesize(self) -> TraceSet:
        grid = self.oracle_grid()
        srcs = [dataclasses.replace(s, node=grid.nearest_node(c.position)) for s, c in zip(self.sources, self.cfg.sources)]
        recs = [grid.nearest_node(self.mesh.nodes[j]) for j in self.receivers.nodes]
        tr = run_forward_fem(grid, self.oracle_model(grid), srcs, recs, self.scheme, self.cfg.T, self.cfg.rho0, self.cfg.c)
        return TraceSet(tr.time, tr.data, self.receivers.nodes)

    def observed_paths(self) -> list[Path]:
        if self.cfg.observed is not None:
            return [self.cfg.resolve(p) for p in self.cfg.observed]
        return [self.output / f"observed_s{k}.csv" for k in range(len(self.sources))]

    def observed(self) -> TraceSet:
        paths = self.observed_paths()
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise ConfigError(f"observed: missing trace files {missing}; run 'synthesize' or set 'observed'")
        try:
            tr = read_trace_set(paths, self.receivers.nodes)
        except ValueError as exc:
            raise ConfigError(f"observed: {exc}") from None
        if len(tr.time) != len(self.times()) or not np.allclose(tr.time, self.times(), rtol=0, atol=1e-6 * self.cfg.dt):
            raise ConfigError("observed: time axis does not match time.dt / time.T")
        return tr

    def problem(self, observed: TraceSet | None = None) -> WaveformProblem:
        return WaveformProblem(
            self.mesh,
            self.scheme,
            self.sources,
            self.receivers,
            observed if observed is not None else self.observed(),
            self.cfg.backend,
            self.stations,
            self.cfg.rho0,
            self.cfg.c,
            self.threads,
        )

    def optimizer(self) -> OptimizerState:
        o = self.cfg.optimizer
        return OptimizerState(memory=o.memory, lo=o.bounds[0], hi=o.bounds[1])


def cmd_mesh_info(args) -> int:
    try:
        mesh = read_mesh_file(args.mesh)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.mesh}: {exc.strerror}") from None
    stats = mesh_statistics(mesh)
    for k, v in stats.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_synthesize(exp: Experiment, args) -> int:
    tr = exp.synthesize()
    for k in range(len(exp.sources)):
        path = exp.output / f"observed_s{k}.csv"
        write_traces(path, tr, k)
        print(path)
    return EXIT_OK


def cmd_forward(exp: Experiment, args) -> int:
    model = exp.initial_model()
    system = assemble_global(exp.mesh, DensityField(model.relative, exp.cfg.rho0, exp.cfg.c), exp.scheme,
                             exp.cfg.backend, exp.stations)
    with ThreadPoolExecutor(exp.threads) as ex:
        tr, _ = run_forward(system, exp.sources, exp.receivers, exp.cfg.T, keep_velocity=False, executor=ex)
    for k in range(len(exp.sources)):
        path = exp.output / f"traces_s{k}.csv"
        write_traces(path, tr, k)
        print(path)
    return EXIT_OK


def cmd_kernel(exp: Experiment, args) -> int:
    problem = exp.problem()
    ev = problem.evaluate(exp.initial_model().relative)
    path = exp.output / "kernel.csv"
    write_nodal_field(path, exp.mesh, {"kernel": ev.kernel, "gradient": ev.g})
    print(f"misfit: {ev.E!r}")
    print(path)
    return EXIT_OK


def cmd_invert(exp: Experiment, args) -> int:
    problem = exp.problem()
    o = exp.cfg.optimizer
    res = invert(problem, exp.initial_model(), o.epochs, o.tolerance, exp.optimizer(), exp.output)
    E0 = res.misfits[0]
    print(f"status: {res.status}")
    print(f"epochs: {len(res.misfits) - 1}")
    print(f"misfit: {res.misfits[-1]!r} (normalized {res.misfits[-1] / E0 if E0 > 0 else 0.0!r})")
    return EXIT_STAGNATION if res.status == "stagnation" else EXIT_OK


COMMANDS = {
    "synthesize": (cmd_synthesize, "generate observed traces with the reference FEM"),
    "forward": (cmd_forward, "forward traces for the initial model"),
    "invert": (cmd_invert, "run the density inversion"),
    "kernel": (cmd_kernel, "one-epoch density kernel and gradient"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sbfwi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("config", nargs="?", help="JSON run configuration")
        src.add_argument("--preset", help="use a packaged preset (e.g. 'hole', 'plate60')")
        p.add_argument("-o", "--output", help="override the output directory")
        p.add_argument("--threads", type=int, help=f"worker threads (overrides config and {THREADS_ENV})")
    p = sub.add_parser("mesh-info", help="print mesh statistics")
    p.add_argument("mesh", help="polygon mesh file")
    return parser


def _load(args) -> RunConfig:
    cfg = load_config(preset_path(args.preset) if args.preset else args.config)
    if args.output:
        cfg = dataclasses.replace(cfg, output=str(Path(args.output).resolve()))
    elif args.preset:
        # packaged presets write next to the caller, not into the install tree
        cfg = dataclasses.replace(cfg, output=str(Path.cwd() / cfg.output))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "mesh-info":
            return cmd_mesh_info(args)
        cfg = _load(args)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads: must be at least 1")
        exp = Experiment(cfg, args.threads)
        return COMMANDS[args.command][0](exp, args)
    except SOLVER_ERRORS as exc:
        print(f"sbfwi: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ConfigError, MeshError, ValueError) as exc:
        print(f"sbfwi: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
