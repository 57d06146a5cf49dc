"""Radially varying coefficient matrices E0, E1, E2, M0.

Elements with the same number of vertices are processed together as an
:class:`ElementGroup`; every array below carries the element index as its
leading axis.  Because all four matrices are linear in the density, each
group stores one "unit density at vertex k" tensor per matrix and the
station matrices are contractions of those tensors with the sampled
densities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import GAUSS, DEGENERATE_TOL, MeshError, PolygonMesh, ShapeSet

RHO_MIN = 1e-6
RHO_MAX = 2.0


class CoefficientError(ValueError):
    pass


@dataclass(frozen=True)
class RadialStations:
    n: int
    xi0: float = 1e-3

    def __post_init__(self):
        if self.n < 2:
            raise ValueError(f"radial discretization needs n >= 2 intervals, got {self.n}")
        if not 0.0 < self.xi0 < 1.0:
            raise ValueError(f"xi0 must lie in (0, 1), got {self.xi0}")

    @property
    def h(self) -> float:
        return (1.0 - self.xi0) / self.n

    @property
    def xi(self) -> np.ndarray:
        xi = self.xi0 + self.h * np.arange(self.n + 1)
        xi[-1] = 1.0
        return xi


@dataclass
class DensityField:
    """Nodal relative densities ``rho/rho0`` plus the reference material."""

    relative: np.ndarray
    rho0: float = 2700.0
    c: float = 6000.0

    def __post_init__(self):
        self.relative = np.asarray(self.relative, dtype=float)
        if not np.all(np.isfinite(self.relative)):
            raise ValueError("density field has non-finite entries")
        lo, hi = self.relative.min(), self.relative.max()
        if lo < RHO_MIN * (1 - 1e-12) or hi > RHO_MAX * (1 + 1e-12):
            raise ValueError(f"relative density outside [{RHO_MIN}, {RHO_MAX}]: range [{lo}, {hi}]")

    @property
    def physical(self) -> np.ndarray:
        return self.rho0 * self.relative


@dataclass
class ElementGroup:
    """Geometry of all polygons sharing one vertex count ``m``."""

    elements: np.ndarray  # (E,) polygon indices in the mesh
    node_ids: np.ndarray  # (E, m)
    centers: np.ndarray  # (E, 2)
    det: np.ndarray  # (E, m, q) det(J_b) per simplex and Gauss point
    b1: np.ndarray  # (E, m, q, 2)
    b2: np.ndarray  # (E, m, q, 2)
    G0: np.ndarray  # (E, m, m, m) E0 for unit rho*c^2 at vertex k -> [e, k, a, b]
    G1: np.ndarray
    G2: np.ndarray
    GM: np.ndarray
    areas: np.ndarray  # (E,)

    @property
    def m(self) -> int:
        return self.node_ids.shape[1]

    def __len__(self):
        return len(self.elements)


def simplex_geometry(coords: np.ndarray, centers: np.ndarray, eta: np.ndarray):
    """Vectorized boundary Jacobian data for every simplex of a group.

    ``coords`` is (E, m, 2).  Returns ``det`` (E, m, q), ``b1``, ``b2``
    (E, m, q, 2).
    """
    A = coords
    B = np.roll(coords, -1, axis=1)
    N = ShapeSet.values(eta)  # (q, 2)
    xb = N[None, None, :, 0, None] * A[:, :, None, :] + N[None, None, :, 1, None] * B[:, :, None, :]
    xb = xb - centers[:, None, None, :]
    dxb = 0.5 * (B - A)[:, :, None, :]
    dxb = np.broadcast_to(dxb, xb.shape)
    det = xb[..., 0] * dxb[..., 1] - xb[..., 1] * dxb[..., 0]
    scale = np.max(np.sum((coords - centers[:, None, :]) ** 2, axis=-1), axis=1)
    if np.any(det <= DEGENERATE_TOL * scale[:, None, None]):
        raise MeshError("degenerate simplex in element group")
    b1 = np.stack([dxb[..., 1], -dxb[..., 0]], axis=-1) / det[..., None]
    b2 = np.stack([-xb[..., 1], xb[..., 0]], axis=-1) / det[..., None]
    return det, b1, b2


def build_group(mesh: PolygonMesh, elements) -> ElementGroup:
    elements = np.asarray(elements, dtype=int)
    polys = [mesh.polygons[e] for e in elements]
    m = polys[0].size
    node_ids = np.array([p.node_ids for p in polys], dtype=int)
    centers = np.array([p.scaling_center for p in polys], dtype=float)
    coords = mesh.nodes[node_ids]
    eta, w = GAUSS.points, GAUSS.weights
    det, b1, b2 = simplex_geometry(coords, centers, eta)
    phi = ShapeSet.values(eta)  # (q, 2)
    dphi = ShapeSet.derivatives(eta)

    E = len(elements)
    G0 = np.zeros((E, m, m, m))
    G1 = np.zeros_like(G0)
    G2 = np.zeros_like(G0)
    GM = np.zeros_like(G0)
    b11 = np.einsum("esqi,esqi->esq", b1, b1)
    b21 = np.einsum("esqi,esqi->esq", b2, b1)
    b22 = np.einsum("esqi,esqi->esq", b2, b2)
    for s in range(m):
        loc = (s, (s + 1) % m)
        for q in range(len(eta)):
            wd = w[q] * det[:, s, q]
            for a in range(2):
                for b in range(2):
                    e0 = wd * b11[:, s, q] * phi[q, a] * phi[q, b]
                    e1 = wd * b21[:, s, q] * dphi[q, a] * phi[q, b]
                    e2 = wd * b22[:, s, q] * dphi[q, a] * dphi[q, b]
                    m0 = wd * phi[q, a] * phi[q, b]
                    for k in range(2):
                        wk = phi[q, k]
                        G0[:, loc[k], loc[a], loc[b]] += wk * e0
                        G1[:, loc[k], loc[a], loc[b]] += wk * e1
                        G2[:, loc[k], loc[a], loc[b]] += wk * e2
                        GM[:, loc[k], loc[a], loc[b]] += wk * m0
    areas = 0.5 * np.einsum("q,esq->e", w, det)
    return ElementGroup(elements, node_ids, centers, det, b1, b2, G0, G1, G2, GM, areas)


def group_elements(mesh: PolygonMesh) -> list[ElementGroup]:
    """Partition the mesh into :class:`ElementGroup` objects by vertex count."""
    by_size: dict[int, list[int]] = {}
    for idx, p in enumerate(mesh.polygons):
        by_size.setdefault(p.size, []).append(idx)
    return [build_group(mesh, by_size[m]) for m in sorted(by_size)]


def sample_radial_density(boundary_rho, xi, center_rho=None):
    """Densities on the ray stations: ``rho_sc + xi (rho_k - rho_sc)``.

    ``boundary_rho`` is (..., m); the scaling-center density defaults to the
    mean of the boundary values.  Returns (..., len(xi), m).
    """
    boundary_rho = np.asarray(boundary_rho, dtype=float)
    if center_rho is None:
        center_rho = boundary_rho.mean(axis=-1)
    center_rho = np.asarray(center_rho, dtype=float)[..., None, None]
    xi = np.asarray(xi, dtype=float)[:, None]
    return center_rho + xi * (boundary_rho[..., None, :] - center_rho)


def fd_derivative(F: np.ndarray, h: float) -> np.ndarray:
    """Radial derivative of station-sampled matrices (station axis -3).

    Central differences inside, forward at the first and backward at the
    last station.
    """
    D = np.empty_like(F)
    D[..., 1:-1, :, :] = (F[..., 2:, :, :] - F[..., :-2, :, :]) / (2.0 * h)
    D[..., 0, :, :] = (F[..., 1, :, :] - F[..., 0, :, :]) / h
    D[..., -1, :, :] = (F[..., -1, :, :] - F[..., -2, :, :]) / h
    return D


@dataclass
class CoefficientSet:
    stations: RadialStations
    E0: np.ndarray  # (..., n+1, m, m)
    E1: np.ndarray
    E2: np.ndarray
    M0: np.ndarray
    dE0: np.ndarray
    dE1: np.ndarray

    @property
    def m(self) -> int:
        return self.E0.shape[-1]

    def element(self, k: int) -> "CoefficientSet":
        """Slice one element out of a batched set."""
        return CoefficientSet(
            self.stations, self.E0[k], self.E1[k], self.E2[k], self.M0[k], self.dE0[k], self.dE1[k]
        )


def coefficient_derivatives(cs: CoefficientSet):
    h = cs.stations.h
    return fd_derivative(cs.E0, h), fd_derivative(cs.E1, h)


def _contract(G, rho):
    return np.einsum("e...k,ekab->e...ab", rho, G)


def assemble_coefficients(
    group: ElementGroup,
    field: DensityField,
    stations: RadialStations,
    center_rho=None,
    check: bool = True,
) -> CoefficientSet:
    """Coefficient matrices of every element in ``group`` at all stations.

    ``center_rho`` overrides the scaling-center density (relative units,
    one value per element); by default it is the mean boundary density.
    """
    rho = field.physical[group.node_ids]  # (E, m)
    if center_rho is not None:
        center_rho = field.rho0 * np.broadcast_to(np.asarray(center_rho, float), (len(group),))
    rho_st = sample_radial_density(rho, stations.xi, center_rho)  # (E, n+1, m)
    c2 = field.c**2
    E0 = c2 * _contract(group.G0, rho_st)
    E1 = c2 * _contract(group.G1, rho_st)
    E2 = c2 * _contract(group.G2, rho_st)
    M0 = _contract(group.GM, rho_st)
    if check:
        try:
            np.linalg.cholesky(E0)
        except np.linalg.LinAlgError:
            raise CoefficientError("E0 is not positive definite at some station") from None
    cs = CoefficientSet(stations, E0, E1, E2, M0, E0, E1)
    cs.dE0, cs.dE1 = coefficient_derivatives(cs)
    return cs


def boundary_coefficients(group: ElementGroup, field: DensityField):
    """E0, E1, E2, M0 evaluated with the nodal (boundary) densities only."""
    rho = field.physical[group.node_ids]
    c2 = field.c**2
    return (
        c2 * _contract(group.G0, rho),
        c2 * _contract(group.G1, rho),
        c2 * _contract(group.G2, rho),
        _contract(group.GM, rho),
    )
