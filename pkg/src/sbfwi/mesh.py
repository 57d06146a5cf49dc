"""Polygon meshes and scaled-boundary geometry.

Each polygon is split into one simplex per edge; the simplices meet at the
scaling center.  Along an edge the boundary is interpolated with the 2-node
linear shape functions, and all geometric quantities needed by the
coefficient matrices are evaluated at 2-point Gauss abscissae.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np
from scipy.spatial import cKDTree

DEGENERATE_TOL = 1e-14
DUPLICATE_TOL = 1e-12


class MeshError(ValueError):
    """Raised for malformed or geometrically invalid meshes."""


@dataclass(frozen=True)
class ShapeSet:
    """Linear edge shape functions with their Gauss rule."""

    points: np.ndarray
    weights: np.ndarray

    @staticmethod
    def linear(npoints: int = 2) -> "ShapeSet":
        x, w = np.polynomial.legendre.leggauss(npoints)
        return ShapeSet(points=x, weights=w)

    @staticmethod
    def values(eta):
        eta = np.asarray(eta, dtype=float)
        return np.stack([0.5 * (1.0 - eta), 0.5 * (1.0 + eta)], axis=-1)

    @staticmethod
    def derivatives(eta):
        eta = np.asarray(eta, dtype=float)
        d = np.empty(eta.shape + (2,))
        d[..., 0] = -0.5
        d[..., 1] = 0.5
        return d


GAUSS = ShapeSet.linear(2)


@dataclass(frozen=True)
class Polygon:
    node_ids: tuple[int, ...]
    scaling_center: tuple[float, float]

    @property
    def size(self) -> int:
        return len(self.node_ids)

    def edges(self):
        ids = self.node_ids
        return [(ids[k], ids[(k + 1) % len(ids)]) for k in range(len(ids))]


@dataclass
class PolygonMesh:
    nodes: np.ndarray
    polygons: list[Polygon]
    shared_edges: dict[tuple[int, int], tuple[int, int]] = field(default_factory=dict)
    boundary_edges: list[tuple[int, int]] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_polygons(self) -> int:
        return len(self.polygons)

    def polygon_coords(self, index: int) -> np.ndarray:
        return self.nodes[list(self.polygons[index].node_ids)]

    def areas(self) -> np.ndarray:
        return np.array([shoelace_area(self.polygon_coords(i)) for i in range(self.n_polygons)])

    def total_area(self) -> float:
        return float(self.areas().sum())

    def bounding_box(self):
        lo = self.nodes.min(axis=0)
        hi = self.nodes.max(axis=0)
        return lo, hi

    def boundary_nodes(self) -> np.ndarray:
        ids = sorted({i for e in self.boundary_edges for i in e})
        return np.array(ids, dtype=int)

    def nearest_node(self, point, candidates: np.ndarray | None = None) -> tuple[int, float]:
        pts = self.nodes if candidates is None else self.nodes[candidates]
        d = np.hypot(pts[:, 0] - point[0], pts[:, 1] - point[1])
        k = int(np.argmin(d))
        node = k if candidates is None else int(candidates[k])
        return node, float(d[k])


def shoelace_area(coords: np.ndarray) -> float:
    x, y = coords[:, 0], coords[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def boundary_jacobian(edge: np.ndarray, center, eta):
    """Boundary Jacobian and b-vectors of one simplex at ``eta``.

    ``edge`` holds the two edge-node coordinates (2x2), ``center`` the
    scaling center.  ``eta`` may be a scalar or an array; the returned
    arrays carry its shape as leading dimensions.

    Returns ``(J_b, det, b1, b2)`` where ``J_b`` is ``[[x_b-x0, y_b-y0],
    [d_eta x_b, d_eta y_b]]`` and ``grad = b1 d_xi + b2 (1/xi) d_eta``.
    """
    edge = np.asarray(edge, dtype=float)
    center = np.asarray(center, dtype=float)
    eta = np.asarray(eta, dtype=float)
    N = ShapeSet.values(eta)
    dN = ShapeSet.derivatives(eta)
    xb = N @ edge - center
    dxb = dN @ edge
    J = np.stack([xb, dxb], axis=-2)
    det = xb[..., 0] * dxb[..., 1] - xb[..., 1] * dxb[..., 0]
    scale = max(float(np.sum((edge - center) ** 2, axis=1).max()), 1e-300)
    if np.any(det <= DEGENERATE_TOL * scale):
        raise MeshError(
            f"degenerate simplex: det(J_b)={float(np.min(det)):.3e} for edge {edge.tolist()} "
            f"seen from center {center.tolist()}"
        )
    b1 = np.stack([dxb[..., 1], -dxb[..., 0]], axis=-1) / det[..., None]
    b2 = np.stack([-xb[..., 1], xb[..., 0]], axis=-1) / det[..., None]
    return J, det, b1, b2


def polygon_area(polygon: Polygon, nodes: np.ndarray) -> float:
    """Area from the scaled-boundary measure ``det(J_b) xi dxi deta``."""
    total = 0.0
    coords = nodes[list(polygon.node_ids)]
    m = len(coords)
    for k in range(m):
        edge = coords[[k, (k + 1) % m]]
        _, det, _, _ = boundary_jacobian(edge, polygon.scaling_center, GAUSS.points)
        total += 0.5 * float(np.dot(GAUSS.weights, det))
    return total


def _check_polygon(index: int, polygon: Polygon, nodes: np.ndarray) -> None:
    if polygon.size < 3:
        raise MeshError(f"polygon {index}: needs at least 3 vertices, got {polygon.size}")
    if len(set(polygon.node_ids)) != polygon.size:
        raise MeshError(f"polygon {index}: repeated vertex in {polygon.node_ids}")
    coords = nodes[list(polygon.node_ids)]
    if shoelace_area(coords) <= 0.0:
        raise MeshError(f"polygon {index}: orientation error (vertices must be counterclockwise)")
    # five samples per edge; for straight edges det(J_b) is constant along the edge
    samples = np.linspace(-1.0, 1.0, 5)
    m = polygon.size
    for k in range(m):
        edge = coords[[k, (k + 1) % m]]
        try:
            boundary_jacobian(edge, polygon.scaling_center, samples)
        except MeshError as exc:
            raise MeshError(f"polygon {index}: not star-convex about its scaling center ({exc})") from None


def build_mesh(nodes, polygons: Iterable) -> PolygonMesh:
    """Validate nodes/polygons and build the shared-edge table.

    ``polygons`` items are either :class:`Polygon` or node-id sequences; in
    the latter case the scaling center defaults to the vertex centroid.
    """
    nodes = np.asarray(nodes, dtype=float)
    if nodes.ndim != 2 or nodes.shape[1] != 2:
        raise MeshError("nodes must be an (N, 2) array")
    if not np.all(np.isfinite(nodes)):
        raise MeshError("non-finite node coordinates")
    pairs = cKDTree(nodes).query_pairs(DUPLICATE_TOL)
    if pairs:
        i, j = sorted(pairs)[0]
        raise MeshError(f"duplicate nodes {i} and {j}")

    polys = []
    for p in polygons:
        if not isinstance(p, Polygon):
            ids = tuple(int(i) for i in p)
            if min(ids) < 0 or max(ids) >= len(nodes):
                raise MeshError(f"polygon {len(polys)}: node id out of range")
            c = nodes[list(ids)].mean(axis=0)
            p = Polygon(ids, (float(c[0]), float(c[1])))
        elif min(p.node_ids) < 0 or max(p.node_ids) >= len(nodes):
            raise MeshError(f"polygon {len(polys)}: node id out of range")
        polys.append(p)
    for idx, p in enumerate(polys):
        _check_polygon(idx, p, nodes)

    directed: dict[tuple[int, int], int] = {}
    for idx, p in enumerate(polys):
        for a, b in p.edges():
            if (a, b) in directed:
                raise MeshError(
                    f"edge ({a}, {b}) used twice with the same orientation "
                    f"(polygons {directed[(a, b)]} and {idx})"
                )
            directed[(a, b)] = idx
    shared = {}
    boundary = []
    for (a, b), idx in directed.items():
        other = directed.get((b, a))
        if other is None:
            boundary.append((a, b))
        elif a < b:
            shared[(a, b)] = (idx, other)
    return PolygonMesh(nodes=nodes, polygons=polys, shared_edges=shared, boundary_edges=sorted(boundary))


class _Lines:
    def __init__(self, stream: TextIO):
        self._it = enumerate(stream, start=1)

    def next(self):
        for lineno, raw in self._it:
            text = raw.split("#", 1)[0].strip()
            if text:
                return lineno, text.split()
        raise MeshError("parse error: unexpected end of file")


def _parse_number(tok: str, lineno: int, col: int, kind=float):
    try:
        return kind(tok)
    except ValueError:
        raise MeshError(f"parse error at line {lineno}, column {col}: bad {kind.__name__} {tok!r}") from None


def load_mesh(stream: TextIO | str) -> PolygonMesh:
    """Read the plain-text mesh format::

        nodes N
        x y                      (N lines)
        polygons P
        k id_1 ... id_k [x0 y0]  (P lines)

    ``#`` starts a comment.  Polygons must be counterclockwise.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = _Lines(stream)

    lineno, toks = lines.next()
    if toks[0] != "nodes" or len(toks) != 2:
        raise MeshError(f"parse error at line {lineno}, column 1: expected 'nodes N'")
    n = _parse_number(toks[1], lineno, 2, int)
    nodes = np.empty((n, 2))
    for i in range(n):
        lineno, toks = lines.next()
        if len(toks) != 2:
            raise MeshError(f"parse error at line {lineno}, column 1: expected 'x y'")
        nodes[i] = [_parse_number(t, lineno, c + 1) for c, t in enumerate(toks)]

    lineno, toks = lines.next()
    if toks[0] != "polygons" or len(toks) != 2:
        raise MeshError(f"parse error at line {lineno}, column 1: expected 'polygons P'")
    npoly = _parse_number(toks[1], lineno, 2, int)
    polys = []
    for _ in range(npoly):
        lineno, toks = lines.next()
        k = _parse_number(toks[0], lineno, 1, int)
        if len(toks) not in (k + 1, k + 3):
            raise MeshError(
                f"parse error at line {lineno}, column {len(toks)}: expected {k} node ids and an optional center"
            )
        ids = tuple(_parse_number(t, lineno, c + 2, int) for c, t in enumerate(toks[1 : k + 1]))
        if any(i < 0 or i >= n for i in ids):
            raise MeshError(f"parse error at line {lineno}: node id out of range")
        if len(toks) == k + 3:
            center = (_parse_number(toks[k + 1], lineno, k + 2), _parse_number(toks[k + 2], lineno, k + 3))
        else:
            c = nodes[list(ids)].mean(axis=0)
            center = (float(c[0]), float(c[1]))
        polys.append(Polygon(ids, center))
    return build_mesh(nodes, polys)


def write_mesh(mesh: PolygonMesh, stream: TextIO, centers: bool = False) -> None:
    stream.write(f"nodes {mesh.n_nodes}\n")
    for x, y in mesh.nodes:
        stream.write(f"{float(x)!r} {float(y)!r}\n")
    stream.write(f"polygons {mesh.n_polygons}\n")
    for p in mesh.polygons:
        line = f"{p.size} " + " ".join(str(i) for i in p.node_ids)
        if centers:
            line += f" {float(p.scaling_center[0])!r} {float(p.scaling_center[1])!r}"
        stream.write(line + "\n")


def read_mesh_file(path) -> PolygonMesh:
    with open(path) as fh:
        return load_mesh(fh)


def mesh_statistics(mesh: PolygonMesh) -> dict:
    sizes = np.array([p.size for p in mesh.polygons])
    lo, hi = mesh.bounding_box()
    return {
        "nodes": mesh.n_nodes,
        "polygons": mesh.n_polygons,
        "area": mesh.total_area(),
        "shared_edges": len(mesh.shared_edges),
        "boundary_edges": len(mesh.boundary_edges),
        "min_vertices": int(sizes.min()),
        "max_vertices": int(sizes.max()),
        "bbox": [float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])],
    }
