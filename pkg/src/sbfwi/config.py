"""Run configuration: JSON schema, defaults and validation.

Layout (keys marked * are required)::

    {
      "mesh"*: "plate.mesh",
      "backend": "radial" | "lowfreq",
      "radial": {"n": 5, "xi0": 1e-3},
      "time"*: {"dt"*: 2e-7, "T"*: 4e-5, "beta": 0.25, "gamma": 0.5},
      "material": {"rho0": 2700, "c": 6000},
      "sources"*: [{"position"*: [x, y], "a0": 1e12, "f0": 5e5, "n_cycles": 2}],
      "receivers": {"edge_pitch": 1e-3, "nodes": null, "exclude_sources": true},
      "optimizer": {"epochs": 50, "tolerance": 1e-6, "memory": 10, "bounds": [1e-6, 2]},
      "oracle": {"nx": 160, "ny": 160, "background": 1.0,
                 "inclusions": [{"center": [x, y], "radius": r, "value": 0.5}]},
      "observed": null | ["s0.csv", ...],
      "initial_model": 1.0 | "snapshot.csv",
      "output": "out",
      "threads": null
    }

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .coefficients import RHO_MAX, RHO_MIN
from .transient import BACKENDS


class ConfigError(ValueError):
    pass


_REQUIRED = object()


def _err(path, msg):
    raise ConfigError(f"{path}: {msg}")


def _number(path, v, positive=True, integer=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        _err(path, f"expected a number, got {type(v).__name__}")
    if not math.isfinite(v):
        _err(path, "must be finite")
    if integer and int(v) != v:
        _err(path, f"expected an integer, got {v}")
    if positive and not v > 0:
        _err(path, f"must be positive, got {v}")
    return int(v) if integer else float(v)


def _point(path, v):
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        _err(path, "expected a two-element [x, y] list")
    return (_number(f"{path}[0]", v[0], positive=False), _number(f"{path}[1]", v[1], positive=False))


def _section(path, raw, spec):
    """Check ``raw`` against ``{key: default}`` and return filled values."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        _err(path, f"expected an object, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(spec))
    if unknown:
        _err(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    out = {}
    for key, default in spec.items():
        if key in raw:
            out[key] = raw[key]
        elif default is _REQUIRED:
            _err(f"{path}.{key}" if path else key, "missing required key")
        else:
            out[key] = default
    return out


@dataclass(frozen=True)
class SourceConfig:
    position: tuple
    a0: float = 1e12
    f0: float = 5e5
    n_cycles: int = 2


@dataclass(frozen=True)
class ReceiverConfig:
    edge_pitch: float | None = 1e-3
    nodes: tuple | None = None
    exclude_sources: bool = True


@dataclass(frozen=True)
class OptimizerConfig:
    epochs: int = 50
    tolerance: float = 1e-6
    memory: int = 10
    bounds: tuple = (RHO_MIN, RHO_MAX)


@dataclass(frozen=True)
class Inclusion:
    center: tuple
    radius: float
    value: float


@dataclass(frozen=True)
class OracleConfig:
    nx: int = 160
    ny: int = 160
    background: float = 1.0
    inclusions: tuple = ()


@dataclass(frozen=True)
class RunConfig:
    mesh: str
    dt: float
    T: float
    sources: tuple
    backend: str = "radial"
    n: int = 5
    xi0: float = 1e-3
    beta: float = 0.25
    gamma: float = 0.5
    rho0: float = 2700.0
    c: float = 6000.0
    receivers: ReceiverConfig = field(default_factory=ReceiverConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    oracle: OracleConfig | None = None
    observed: tuple | None = None
    initial_model: float | str = 1.0
    output: str = "out"
    threads: int | None = None
    base_dir: str = field(default=".", compare=False)

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _parse_sources(raw):
    if not isinstance(raw, list) or not raw:
        _err("sources", "expected a non-empty list")
    out = []
    for k, s in enumerate(raw):
        path = f"sources[{k}]"
        d = _section(path, s, {"position": _REQUIRED, "a0": 1e12, "f0": 5e5, "n_cycles": 2})
        out.append(
            SourceConfig(
                _point(f"{path}.position", d["position"]),
                _number(f"{path}.a0", d["a0"], positive=False),
                _number(f"{path}.f0", d["f0"]),
                _number(f"{path}.n_cycles", d["n_cycles"], integer=True),
            )
        )
    return tuple(out)


def _parse_receivers(raw):
    d = _section("receivers", raw, {"edge_pitch": 1e-3, "nodes": None, "exclude_sources": True})
    pitch, nodes = d["edge_pitch"], d["nodes"]
    if nodes is not None:
        if not isinstance(nodes, list) or not nodes:
            _err("receivers.nodes", "expected a non-empty list of node ids")
        nodes = tuple(_number(f"receivers.nodes[{k}]", v, positive=False, integer=True) for k, v in enumerate(nodes))
        if any(v < 0 for v in nodes):
            _err("receivers.nodes", "node ids must be non-negative")
        pitch = None if "edge_pitch" not in (raw or {}) else pitch
    if pitch is not None:
        pitch = _number("receivers.edge_pitch", pitch)
    if pitch is None and nodes is None:
        _err("receivers", "give either edge_pitch or nodes")
    if pitch is not None and nodes is not None:
        _err("receivers", "edge_pitch and nodes are mutually exclusive")
    if not isinstance(d["exclude_sources"], bool):
        _err("receivers.exclude_sources", "expected true or false")
    return ReceiverConfig(pitch, nodes, d["exclude_sources"])


def _parse_optimizer(raw):
    d = _section("optimizer", raw, {"epochs": 50, "tolerance": 1e-6, "memory": 10, "bounds": [RHO_MIN, RHO_MAX]})
    b = d["bounds"]
    if not isinstance(b, (list, tuple)) or len(b) != 2:
        _err("optimizer.bounds", "expected [lower, upper]")
    lo, hi = _number("optimizer.bounds[0]", b[0]), _number("optimizer.bounds[1]", b[1])
    if not lo < hi:
        _err("optimizer.bounds", f"lower bound {lo} must be below upper bound {hi}")
    epochs = _number("optimizer.epochs", d["epochs"], positive=False, integer=True)
    if epochs < 0:
        _err("optimizer.epochs", "must be non-negative")
    return OptimizerConfig(
        epochs,
        _number("optimizer.tolerance", d["tolerance"], positive=False),
        _number("optimizer.memory", d["memory"], integer=True),
        (lo, hi),
    )


def _parse_oracle(raw):
    if raw is None:
        return None
    d = _section("oracle", raw, {"nx": 160, "ny": 160, "background": 1.0, "inclusions": []})
    if not isinstance(d["inclusions"], list):
        _err("oracle.inclusions", "expected a list")
    incs = []
    for k, inc in enumerate(d["inclusions"]):
        path = f"oracle.inclusions[{k}]"
        e = _section(path, inc, {"center": _REQUIRED, "radius": _REQUIRED, "value": _REQUIRED})
        incs.append(Inclusion(_point(f"{path}.center", e["center"]), _number(f"{path}.radius", e["radius"]),
                              _number(f"{path}.value", e["value"])))
    return OracleConfig(
        _number("oracle.nx", d["nx"], integer=True),
        _number("oracle.ny", d["ny"], integer=True),
        _number("oracle.background", d["background"]),
        tuple(incs),
    )


_TOP = {
    "mesh": _REQUIRED,
    "backend": "radial",
    "radial": None,
    "time": _REQUIRED,
    "material": None,
    "sources": _REQUIRED,
    "receivers": None,
    "optimizer": None,
    "oracle": None,
    "observed": None,
    "initial_model": 1.0,
    "output": "out",
    "threads": None,
}


def config_from_dict(raw: dict, base_dir=".") -> RunConfig:
    d = _section("", raw, _TOP)
    if not isinstance(d["mesh"], str) or not d["mesh"]:
        _err("mesh", "expected a file path")
    backend = d["backend"]
    if backend not in BACKENDS:
        _err("backend", f"expected one of {list(BACKENDS)}, got {backend!r}")
    rad = _section("radial", d["radial"], {"n": 5, "xi0": 1e-3})
    n = _number("radial.n", rad["n"], integer=True)
    if backend == "radial" and n < 2:
        _err("radial.n", f"radial stencil needs n >= 2, got {n}")
    xi0 = _number("radial.xi0", rad["xi0"])
    if not xi0 < 1:
        _err("radial.xi0", "must lie in (0, 1)")
    tm = _section("time", d["time"], {"dt": _REQUIRED, "T": _REQUIRED, "beta": 0.25, "gamma": 0.5})
    dt, T = _number("time.dt", tm["dt"]), _number("time.T", tm["T"])
    steps = round(T / dt)
    if steps < 1 or abs(steps * dt - T) > 1e-6 * dt:
        _err("time.T", f"{T} is not a whole number of steps of {dt}")
    beta = _number("time.beta", tm["beta"])
    gamma = _number("time.gamma", tm["gamma"])
    if not 0.5 <= gamma <= 1.0:
        _err("time.gamma", "must lie in [0.5, 1]")
    mat = _section("material", d["material"], {"rho0": 2700.0, "c": 6000.0})
    observed = d["observed"]
    if observed is not None:
        if not isinstance(observed, list) or not all(isinstance(p, str) for p in observed):
            _err("observed", "expected a list of trace file paths")
        observed = tuple(observed)
    init = d["initial_model"]
    if isinstance(init, str):
        if not init:
            _err("initial_model", "empty path")
    else:
        init = _number("initial_model", init)
    if not isinstance(d["output"], str) or not d["output"]:
        _err("output", "expected a directory path")
    threads = d["threads"]
    if threads is not None:
        threads = _number("threads", threads, integer=True)
    sources = _parse_sources(d["sources"])
    if observed is not None and len(observed) != len(sources):
        _err("observed", f"{len(observed)} trace files for {len(sources)} sources")
    return RunConfig(
        mesh=d["mesh"],
        dt=dt,
        T=T,
        sources=sources,
        backend=backend,
        n=n,
        xi0=xi0,
        beta=beta,
        gamma=gamma,
        rho0=_number("material.rho0", mat["rho0"]),
        c=_number("material.c", mat["c"]),
        receivers=_parse_receivers(d["receivers"]),
        optimizer=_parse_optimizer(d["optimizer"]),
        oracle=_parse_oracle(d["oracle"]),
        observed=observed,
        initial_model=init,
        output=d["output"],
        threads=threads,
        base_dir=str(base_dir),
    )


def parse_config(text: str, base_dir=".") -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(raw, base_dir)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {
        "mesh": cfg.mesh,
        "backend": cfg.backend,
        "radial": {"n": cfg.n, "xi0": cfg.xi0},
        "time": {"dt": cfg.dt, "T": cfg.T, "beta": cfg.beta, "gamma": cfg.gamma},
        "material": {"rho0": cfg.rho0, "c": cfg.c},
        "sources": [{**asdict(s), "position": list(s.position)} for s in cfg.sources],
        "receivers": {
            "edge_pitch": cfg.receivers.edge_pitch,
            "nodes": list(cfg.receivers.nodes) if cfg.receivers.nodes is not None else None,
            "exclude_sources": cfg.receivers.exclude_sources,
        },
        "optimizer": {**asdict(cfg.optimizer), "bounds": list(cfg.optimizer.bounds)},
        "oracle": None,
        "observed": list(cfg.observed) if cfg.observed is not None else None,
        "initial_model": cfg.initial_model,
        "output": cfg.output,
        "threads": cfg.threads,
    }
    if cfg.oracle is not None:
        o = cfg.oracle
        out["oracle"] = {
            "nx": o.nx,
            "ny": o.ny,
            "background": o.background,
            "inclusions": [{"center": list(i.center), "radius": i.radius, "value": i.value} for i in o.inclusions],
        }
    return out


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2) + "\n"


def preset_path(name: str) -> Path:
    p = Path(__file__).parent / "presets" / f"{name}.json"
    if not p.exists():
        avail = sorted(q.stem for q in p.parent.glob("*.json"))
        raise ConfigError(f"unknown preset {name!r}; available: {avail}")
    return p


__all__ = [
    "ConfigError",
    "RunConfig",
    "SourceConfig",
    "ReceiverConfig",
    "OptimizerConfig",
    "OracleConfig",
    "Inclusion",
    "parse_config",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "serialize_config",
    "preset_path",
]
