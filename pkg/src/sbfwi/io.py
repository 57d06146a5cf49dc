"""CSV readers and writers for traces, nodal fields and misfit histories."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .mesh import PolygonMesh
from .transient import TraceSet


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def write_traces(path, traces: TraceSet, source: int = 0) -> None:
    """One source's traces: header ``t,r0,r1,...``, one row per step."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"r{k}" for k in range(len(traces.receivers))])
        for t, row in zip(traces.time, traces.data[source]):
            w.writerow([_fmt(t)] + [_fmt(v) for v in row])


def read_traces(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(time, data[step, receiver])`` from a trace CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["t"]:
        raise ValueError(f"{path}: expected a header starting with 't'")
    header = rows[0]
    for k, name in enumerate(header[1:]):
        if name != f"r{k}":
            raise ValueError(f"{path}: column {k + 1} should be 'r{k}', found {name!r}")
    try:
        arr = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if arr.ndim != 2 or arr.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    return arr[:, 0], arr[:, 1:]


def read_trace_set(paths, receivers) -> TraceSet:
    """Stack per-source trace files into one :class:`TraceSet`."""
    times, data = None, []
    for p in paths:
        t, d = read_traces(p)
        if times is None:
            times = t
        elif len(t) != len(times) or not np.allclose(t, times, rtol=0, atol=1e-15):
            raise ValueError(f"{p}: time axis differs from {paths[0]}")
        if d.shape[1] != len(receivers):
            raise ValueError(f"{p}: {d.shape[1]} receiver columns, expected {len(receivers)}")
        data.append(d)
    return TraceSet(times, np.stack(data), np.asarray(receivers, int))


def write_nodal_field(path, mesh: PolygonMesh, columns: dict) -> None:
    """CSV keyed by node id with coordinates plus the given columns."""
    names = list(columns)
    values = [np.asarray(columns[n], float) for n in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "x", "y"] + names)
        for j, p in enumerate(mesh.nodes):
            w.writerow([j, _fmt(p[0]), _fmt(p[1])] + [_fmt(v[j]) for v in values])


def write_snapshot(path, mesh: PolygonMesh, relative) -> None:
    write_nodal_field(path, mesh, {"rho_rel": relative})


def read_snapshot(path, n_nodes: int) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "rho_rel" not in reader.fieldnames:
            raise ValueError(f"{path}: missing 'rho_rel' column")
        rel = np.full(n_nodes, np.nan)
        for row in reader:
            rel[int(row["node_id"])] = float(row["rho_rel"])
    if np.any(np.isnan(rel)):
        raise ValueError(f"{path}: snapshot does not cover all {n_nodes} nodes")
    return rel


def write_misfit_history(path, misfits) -> None:
    E0 = misfits[0] if len(misfits) else 0.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "E", "E_normalized"])
        for k, E in enumerate(misfits):
            w.writerow([k, _fmt(E), _fmt(E / E0) if E0 > 0 else "nan"])


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
