import numpy as np
import pytest

from sbfwi.condensation import TimeScheme
from sbfwi.fem import (
    FEMSystem,
    QuadMesh,
    disk_model,
    fem_gradient,
    fem_misfit,
    inclusion_model,
    quad_matrices,
    run_forward_fem,
)
from sbfwi.inversion import accumulate_kernel
from sbfwi.transient import SourceSignal, trapezoid_weights

SCHEME = TimeScheme(2e-7)
UNIT = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def test_unit_square_matrices():
    K, M = quad_matrices(UNIT, 1.0, 1.0)
    assert np.allclose(np.diag(K), 2 / 3)
    assert K[0, 1] == pytest.approx(-1 / 6) and K[0, 3] == pytest.approx(-1 / 6)
    assert K[0, 2] == pytest.approx(-1 / 3)
    np.testing.assert_allclose(K.sum(axis=1), 0.0, atol=1e-15)
    assert M.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(K, K.T, atol=1e-15)
    np.testing.assert_allclose(M, M.T, atol=1e-15)


def test_inverted_cell_rejected():
    with pytest.raises(ValueError):
        quad_matrices(UNIT[::-1], 1.0, 1.0)


def test_grid_geometry():
    g = QuadMesh(2.0, 1.0, 4, 2, x0=1.0)
    assert g.n_nodes == 15 and len(g.cells) == 8
    assert g.nearest_node((3.0, 1.0)) == 14
    np.testing.assert_allclose(g.nodes[0], [1.0, 0.0])


def test_inclusion_models():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
    np.testing.assert_array_equal(disk_model(nodes, (0, 0), 1.0), [0.5, 0.5, 1.0])
    rel = inclusion_model(nodes, [((0, 0), 2.0, 0.7), ((1, 0), 0.1, 0.3)], background=1.2)
    np.testing.assert_array_equal(rel, [0.7, 0.3, 1.2])


def test_global_matrices_properties():
    g = QuadMesh(1e-2, 1e-2, 6, 5)
    rel = np.random.default_rng(0).uniform(0.5, 1.5, g.n_nodes)
    s = FEMSystem(g, rel, SCHEME)
    np.testing.assert_allclose(s.K @ np.ones(g.n_nodes), 0.0, atol=1e-9 * abs(s.K).max())
    assert abs(s.K - s.K.T).max() <= 1e-12 * abs(s.K).max()
    # total mass is the bilinear interpolant of rho integrated exactly
    total = np.ones(g.n_nodes) @ s.M @ np.ones(g.n_nodes)
    cell_area = (1e-2 / 6) * (1e-2 / 5)
    exact = 2700.0 * cell_area * rel[g.cells].mean(axis=1).sum()
    assert total == pytest.approx(exact, rel=1e-12)


def test_zero_source_gives_zero_traces():
    g = QuadMesh(1e-2, 1e-2, 8, 8)
    src = SourceSignal(0, a0=0.0)
    tr = run_forward_fem(g, np.ones(g.n_nodes), [src], [5, 40], SCHEME, 20 * SCHEME.dt)
    assert not tr.data.any()


@pytest.mark.parametrize("distance", [12e-3, 8e-3])
def test_first_arrival_time(distance):
    g = QuadMesh(20e-3, 20e-3, 160, 160)
    src = SourceSignal(g.nearest_node((10e-3, 16e-3)))
    rec = g.nearest_node((10e-3, 16e-3 - distance))
    tr = run_forward_fem(g, np.ones(g.n_nodes), [src], [rec], SCHEME, 4e-6)
    u = np.abs(tr.data[0, :, 0])
    onset = tr.time[np.argmax(u > 1e-3 * u.max())]
    assert abs(onset - distance / 6000.0) <= 1.01 * SCHEME.dt


def test_grid_refinement():
    out = []
    for nx in (80, 160, 320):
        g = QuadMesh(20e-3, 10e-3, nx, nx // 2)
        rec = [g.nearest_node((5e-3, 0.0)), g.nearest_node((15e-3, 0.0))]
        tr = run_forward_fem(g, np.ones(g.n_nodes), [SourceSignal(g.nearest_node((10e-3, 10e-3)))], rec, SCHEME, 10e-6)
        out.append(tr.data[0])

    def change(a, b):
        return np.max(np.sqrt(np.mean((a - b) ** 2, axis=0)) / np.abs(b).max(axis=0))

    d1, d2 = change(out[0], out[1]), change(out[1], out[2])
    assert d1 < 5e-3
    assert 3.2 < d1 / d2 < 4.8


def test_single_cell_energy_conservation():
    g = QuadMesh(1e-3, 1e-3, 1, 1)
    s = FEMSystem(g, np.ones(4), SCHEME)
    # self-equilibrated impulse: no rigid-body drift
    values = np.zeros((1001, 2))
    values[1] = [1e6, -1e6]
    U, A = s.march([0, 2], values, keep=True)
    V = np.zeros_like(U)
    for k in range(1, len(U)):
        V[k] = V[k - 1] + 0.5 * SCHEME.dt * (A[k - 1] + A[k])
    K, M = s.K.toarray(), s.M.toarray()
    energy = 0.5 * np.einsum("ti,ij,tj->t", V, M, V) + 0.5 * np.einsum("ti,ij,tj->t", U, K, U)
    # the impulse acts only during the first step; afterwards the scheme is conservative
    e = energy[2:]
    assert np.max(np.abs(e - e[0])) <= 1e-10 * e[0]


def _small_problem():
    g = QuadMesh(10e-3, 10e-3, 10, 10)
    src = [SourceSignal(g.nearest_node((5e-3, 10e-3)))]
    rec = np.array([g.nearest_node(p) for p in [(0, 0), (3e-3, 0), (7e-3, 0), (10e-3, 0)]])
    observed = run_forward_fem(g, disk_model(g.nodes, (5e-3, 5e-3), 2e-3, 0.5), src, rec, SCHEME, 50 * SCHEME.dt)
    return g, src, rec, observed


def test_gradient_vanishes_at_truth():
    g, src, rec, _ = _small_problem()
    truth = np.ones(g.n_nodes)
    observed = run_forward_fem(g, truth, src, rec, SCHEME, 50 * SCHEME.dt)
    E, grad = fem_gradient(g, truth, src, rec, observed, SCHEME)
    assert E == 0.0 and not grad.any()


def test_misfit_matches_gradient_routine():
    g, src, rec, observed = _small_problem()
    m0 = np.ones(g.n_nodes)
    E, _ = fem_gradient(g, m0, src, rec, observed, SCHEME)
    assert E == pytest.approx(fem_misfit(FEMSystem(g, m0, SCHEME), src, rec, observed), rel=1e-12)


def test_reduced_kernel_differs_but_descends():
    """Dropping the gradient-correlation term changes the gradient; record that it still descends."""
    g, src, rec, observed = _small_problem()
    m0 = np.ones(g.n_nodes)
    _, full = fem_gradient(g, m0, src, rec, observed, SCHEME)
    s = FEMSystem(g, m0, SCHEME)
    U, A = s.march([src[0].node], src[0].sample(observed.time)[:, None], keep=True)
    V = np.zeros_like(U)
    for k in range(1, len(U)):
        V[k] = V[k - 1] + 0.5 * SCHEME.dt * (A[k - 1] + A[k])
    residual = observed.data[0] - U[:, rec]
    adj = _fem_adjoint_velocity(s, residual, rec)
    area = np.zeros(g.n_nodes)
    np.add.at(area, g.cells, (1e-3) ** 2 / 4)
    reduced = 2700.0 * area * accumulate_kernel(V, adj, SCHEME.dt)
    assert np.linalg.norm(reduced - full) > 1e-3 * np.linalg.norm(full)
    assert reduced @ full > 0


def _fem_adjoint_velocity(system, residual, receivers):
    """Reversed-source adjoint through the FEM march (mirrors the SBFEM convention)."""
    n = len(residual) - 1
    tw = trapezoid_weights(n, system.scheme.dt)
    s = np.zeros((n + 2, len(receivers)))
    s[1:] = (tw[:, None] * residual)[::-1]
    U, A = system.march(receivers, s, keep=True)
    V = np.zeros_like(U)
    for k in range(1, len(U)):
        V[k] = V[k - 1] + 0.5 * system.scheme.dt * (A[k - 1] + A[k])
    return V[::-1][: n + 1]

