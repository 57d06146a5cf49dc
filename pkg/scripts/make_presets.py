"""Regenerate the packaged preset meshes."""

from pathlib import Path

import numpy as np

from sbfwi.mesh import write_mesh
from sbfwi.meshgen import voronoi_rectangle
from sbfwi.transient import edge_points

PRESETS = Path(__file__).resolve().parents[1] / "src" / "sbfwi" / "presets"


def make(name, size, cells, sources, pitch=1e-3, seed=0):
    pts = np.vstack([edge_points((0.0, 0.0), (size, size), pitch), sources])
    mesh = voronoi_rectangle(size, size, cells, seed=seed, boundary_points=pts)
    with open(PRESETS / f"{name}.mesh", "w") as fh:
        fh.write(f"# {cells}-cell centroidal Voronoi mesh of a {size * 1e3:g} mm square plate\n")
        write_mesh(mesh, fh)
    print(name, mesh.n_nodes, mesh.n_polygons)


if __name__ == "__main__":
    make("hole", 20e-3, 300, [(5e-3, 20e-3), (15e-3, 20e-3)])
    make("plate60", 60e-3, 1000, [(15e-3, 60e-3), (45e-3, 60e-3)])
