"""Small mesh builders for tests, presets and demos.

These are convenience generators, not a meshing toolkit: rectangles only.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import Voronoi

from .mesh import PolygonMesh, build_mesh, shoelace_area


def rectangle_quads(width: float, height: float, nx: int, ny: int) -> PolygonMesh:
    """Structured grid of square-ish quadrilateral polygons."""
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return j * (nx + 1) + i

    polys = [(nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)) for j in range(ny) for i in range(nx)]
    return build_mesh(nodes, polys)


def _mirrored(points, width, height):
    p = points
    return np.vstack(
        [
            p,
            np.column_stack([-p[:, 0], p[:, 1]]),
            np.column_stack([2 * width - p[:, 0], p[:, 1]]),
            np.column_stack([p[:, 0], -p[:, 1]]),
            np.column_stack([p[:, 0], 2 * height - p[:, 1]]),
        ]
    )


def _cells(points, width, height):
    vor = Voronoi(_mirrored(points, width, height))
    cells = []
    for k in range(len(points)):
        region = vor.regions[vor.point_region[k]]
        verts = vor.vertices[region]
        verts[:, 0] = np.clip(verts[:, 0], 0.0, width)
        verts[:, 1] = np.clip(verts[:, 1], 0.0, height)
        c = verts.mean(axis=0)
        order = np.argsort(np.arctan2(verts[:, 1] - c[1], verts[:, 0] - c[0]))
        cells.append(verts[order])
    return cells


def _centroid(poly):
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum() / 2.0
    return np.array([((x + xn) * cross).sum(), ((y + yn) * cross).sum()]) / (6.0 * a)


def voronoi_rectangle(
    width: float,
    height: float,
    n_cells: int,
    seed: int = 0,
    lloyd_iterations: int = 30,
    boundary_points=None,
    merge_tol: float | None = None,
) -> PolygonMesh:
    """Centroidal-Voronoi-style polygon mesh of a rectangle.

    Generators are relaxed with Lloyd iterations; cells are clipped to the
    rectangle by mirroring the generators across its edges.  Points listed
    in ``boundary_points`` that lie on the rectangle edges are inserted as
    extra boundary vertices (e.g. transducer positions).
    """
    rng = np.random.default_rng(seed)
    pts = rng.uniform([0.0, 0.0], [width, height], size=(n_cells, 2))
    for _ in range(lloyd_iterations):
        pts = np.array([_centroid(c) for c in _cells(pts, width, height)])
    cells = _cells(pts, width, height)

    h = np.sqrt(width * height / n_cells)
    tol = merge_tol if merge_tol is not None else 0.05 * h
    eps = 1e-9 * max(width, height)
    coords: list[np.ndarray] = []
    polys = []
    grid: dict[tuple[int, int], list[int]] = {}

    def node_for(p):
        key = (int(np.floor(p[0] / tol)), int(np.floor(p[1] / tol)))
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for idx in grid.get((key[0] + dx, key[1] + dy), ()):
                    if np.hypot(*(coords[idx] - p)) < tol:
                        # keep whichever copy lies on more rectangle sides
                        if sum(_on_side(p, width, height, eps)) > sum(_on_side(coords[idx], width, height, eps)):
                            coords[idx] = np.array(p, dtype=float)
                        return idx
        coords.append(np.array(p, dtype=float))
        grid.setdefault(key, []).append(len(coords) - 1)
        return len(coords) - 1

    for cell in cells:
        ids = []
        for v in cell:
            i = node_for(v)
            if not ids or ids[-1] != i:
                ids.append(i)
        if len(ids) > 1 and ids[0] == ids[-1]:
            ids.pop()
        polys.append(ids)

    nodes = np.array(coords)
    # snap near-boundary coordinates exactly onto the rectangle
    for col, hi in ((0, width), (1, height)):
        nodes[np.abs(nodes[:, col]) < 1e-9 * h, col] = 0.0
        nodes[np.abs(nodes[:, col] - hi) < 1e-9 * h, col] = hi

    if boundary_points is not None:
        nodes, polys = _insert_boundary_points(nodes, polys, np.asarray(boundary_points, float), width, height, tol, 0.3 * h)

    polys = [p if shoelace_area(nodes[p]) > 0 else p[::-1] for p in polys]
    return build_mesh(nodes, polys)


def _is_corner(p, width, height, eps):
    s = _on_side(p, width, height, eps)
    return (s[0] or s[2]) and (s[1] or s[3])


def _on_side(p, width, height, eps):
    return (
        abs(p[1]) < eps,
        abs(p[0] - width) < eps,
        abs(p[1] - height) < eps,
        abs(p[0]) < eps,
    )


def _insert_boundary_points(nodes, polys, points, width, height, tol, snap):
    nodes = [np.array(p) for p in nodes]
    eps = 1e-9 * max(width, height)
    for q in points:
        if not any(_on_side(q, width, height, eps)):
            raise ValueError(f"point {q.tolist()} is not on the rectangle boundary")
        d = np.array([np.hypot(*(n - q)) for n in nodes])
        near = int(np.argmin(d))
        if d[near] < snap and not _is_corner(nodes[near], width, height, eps):
            sq = _on_side(q, width, height, eps)
            sn = _on_side(nodes[near], width, height, eps)
            if any(x and y for x, y in zip(sq, sn)):
                # slide the existing boundary vertex instead of creating a sliver edge
                nodes[near] = np.array(q, float)
                continue
        if d[near] < tol:
            continue
        for ids in polys:
            m = len(ids)
            done = False
            for k in range(m):
                a, b = nodes[ids[k]], nodes[ids[(k + 1) % m]]
                ab = b - a
                L2 = float(ab @ ab)
                t = float((q - a) @ ab) / L2
                if 0.0 < t < 1.0 and abs(ab[0] * (q - a)[1] - ab[1] * (q - a)[0]) / np.sqrt(L2) < eps:
                    # must be an outer edge: both endpoints on the same rectangle side
                    sa, sb = _on_side(a, width, height, eps), _on_side(b, width, height, eps)
                    if any(x and y for x, y in zip(sa, sb)):
                        nodes.append(np.array(q, float))
                        ids.insert(k + 1, len(nodes) - 1)
                        done = True
                        break
            if done:
                break
    return np.array(nodes), polys
