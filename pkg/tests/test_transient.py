from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from sbfwi.coefficients import DensityField, RadialStations, assemble_coefficients, group_elements
from sbfwi.condensation import TimeScheme, build_blocks, condense
from sbfwi.mesh import build_mesh, read_mesh_file
from sbfwi.meshgen import rectangle_quads, voronoi_rectangle
from sbfwi.config import preset_path
from sbfwi.transient import (
    ReceiverArray,
    SolverError,
    SourceSignal,
    WaveState,
    assemble_global,
    edge_points,
    edge_receivers,
    lumped_weights,
    n_steps_for,
    run_forward,
    run_source,
    sine_burst,
    snap_to_nodes,
    step,
    trapezoid_weights,
)

SCHEME = TimeScheme(2e-7)
STATIONS = RadialStations(5)


@pytest.fixture(scope="module")
def plate():
    mesh = voronoi_rectangle(10e-3, 6e-3, 40, seed=2)
    rel = np.random.default_rng(1).uniform(0.7, 1.3, mesh.n_nodes)
    return mesh, DensityField(rel)


def test_sine_burst_values():
    a0, f0 = 1e12, 5e5
    assert sine_burst(0.0, a0, f0, 2) == 0.0
    assert sine_burst(2 / f0, a0, f0, 2) == pytest.approx(0.0, abs=1e-3)
    assert sine_burst(0.25 / f0, a0, f0, 2) == pytest.approx(np.sin(np.pi / 2) * np.sin(np.pi / 8) ** 2 * a0, rel=1e-12)
    assert sine_burst(-1e-7, a0, f0, 2) == 0.0 and sine_burst(5e-6, a0, f0, 2) == 0.0


def test_source_validation():
    with pytest.raises(ValueError):
        SourceSignal(0, f0=0.0)
    with pytest.raises(ValueError):
        SourceSignal(0, n_cycles=1.5)


def test_step_count_and_trace_length():
    assert n_steps_for(40e-6, 0.2e-6) == 200
    with pytest.raises(ValueError):
        n_steps_for(40.1e-6, 0.2e-6)
    mesh = rectangle_quads(2e-3, 2e-3, 2, 2)
    system = assemble_global(mesh, DensityField(np.ones(mesh.n_nodes)), SCHEME, "radial", STATIONS)
    tr, vel = run_forward(system, [SourceSignal(0)], ReceiverArray([8]), 40e-6)
    assert tr.data.shape == (1, 201, 1) and len(tr.time) == 201
    assert vel[0].dtype == np.float32


def test_trapezoid_weights():
    w = trapezoid_weights(200, 0.2e-6)
    assert len(w) == 201 and w.sum() == pytest.approx(200 * 0.2e-6)
    assert w[0] == w[-1] == pytest.approx(0.1e-6)


def test_plate60_receivers_and_sources():
    mesh = read_mesh_file(preset_path("plate60").with_name("plate60.mesh"))
    lo, hi = mesh.bounding_box()
    np.testing.assert_allclose(hi - lo, [60e-3, 60e-3])
    assert len(edge_points(lo, hi, 1e-3)) == 240
    rec = edge_receivers(mesh, 1e-3)
    assert len(rec) == 240
    src, d = snap_to_nodes(mesh, [(15e-3, 60e-3), (45e-3, 60e-3)])
    assert d < 1e-12
    xs = mesh.nodes[src, 0]
    assert xs[0] + xs[1] == pytest.approx(60e-3)


def test_receivers_must_be_unique():
    with pytest.raises(ValueError):
        ReceiverArray([1, 2, 1])


def test_one_element_global_equals_element():
    nodes = np.array([[0, 0], [1, 0], [1.2, 0.8], [0.4, 1.1], [-0.2, 0.6]]) * 1e-3
    mesh = build_mesh(nodes, [range(5)])
    field = DensityField(np.array([0.8, 1.0, 1.2, 0.9, 1.1]))
    system = assemble_global(mesh, field, SCHEME, "radial", STATIONS)
    g = group_elements(mesh)[0]
    S = condense(build_blocks(assemble_coefficients(g, field, STATIONS), SCHEME)).S[0]
    np.testing.assert_allclose(system.A.toarray(), S, rtol=1e-14)


def test_two_elements_add_at_shared_nodes():
    nodes = np.array([[0, 0], [1, 0], [2, 0], [2, 1], [1, 1], [0, 1]], float) * 1e-3
    polys = [[0, 1, 4, 5], [1, 2, 3, 4]]
    mesh = build_mesh(nodes, polys)
    field = DensityField(np.ones(6))
    A = assemble_global(mesh, field, SCHEME, "radial", STATIONS).A.toarray()
    parts = []
    for p in polys:
        one = build_mesh(nodes[p], [range(4)])
        parts.append(assemble_global(one, DensityField(np.ones(4)), SCHEME, "radial", STATIONS).A.toarray())
    expected = np.zeros((6, 6))
    for p, B in zip(polys, parts):
        expected[np.ix_(p, p)] += B
    np.testing.assert_allclose(A, expected, rtol=1e-12, atol=1e-12 * np.abs(A).max())


def test_lumped_weights_partition_area(plate):
    mesh, _ = plate
    assert lumped_weights(mesh, group_elements(mesh)).sum() == pytest.approx(mesh.total_area(), rel=1e-12)


@pytest.mark.parametrize("backend", ["radial", "lowfreq"])
def test_zero_input_stays_zero(plate, backend):
    mesh, field = plate
    system = assemble_global(mesh, field, SCHEME, backend, STATIONS)
    res = run_source(system, [0], np.zeros((201, 1)), np.arange(mesh.n_nodes), keep_full=True)
    assert not res.displacement.any() and not res.velocity.any()


@pytest.mark.parametrize("backend", ["radial", "lowfreq"])
def test_doubling_amplitude_doubles_traces(plate, backend):
    mesh, field = plate
    system = assemble_global(mesh, field, SCHEME, backend, STATIONS)
    rec = ReceiverArray(mesh.boundary_nodes()[::3])
    a, _ = run_forward(system, [SourceSignal(0)], rec, 8e-6, keep_velocity=False)
    b, _ = run_forward(system, [SourceSignal(0, a0=2e12)], rec, 8e-6, keep_velocity=False)
    np.testing.assert_array_equal(b.data, 2 * a.data)


def test_reciprocity_lowfreq(plate):
    mesh, field = plate
    system = assemble_global(mesh, field, SCHEME, "lowfreq")
    A, B = 0, int(mesh.boundary_nodes()[-5])
    ab, _ = run_forward(system, [SourceSignal(A)], ReceiverArray([B]), 8e-6, keep_velocity=False)
    ba, _ = run_forward(system, [SourceSignal(B)], ReceiverArray([A]), 8e-6, keep_velocity=False)
    assert np.max(np.abs(ab.data - ba.data)) <= 1e-8 * np.max(np.abs(ab.data))


def test_radial_stiffness_is_nearly_symmetric(plate):
    mesh, field = plate
    system = assemble_global(mesh, field, SCHEME, "radial", STATIONS)
    # the finite-difference condensation is not exactly symmetric; it should be close
    assert system.asymmetry < 0.05


def test_backends_agree_at_constant_density():
    # regular cells: the radial discretization converges at second order there
    mesh = rectangle_quads(10e-3, 6e-3, 40, 24)
    field = DensityField(np.ones(mesh.n_nodes))
    rec = ReceiverArray(mesh.boundary_nodes()[::2])
    src = [SourceSignal(int(mesh.boundary_nodes()[0]))]
    low = assemble_global(mesh, field, SCHEME, "lowfreq")
    rad = assemble_global(mesh, field, SCHEME, "radial", RadialStations(40))

    def gap(T):
        a, _ = run_forward(low, src, rec, T, keep_velocity=False)
        b, _ = run_forward(rad, src, rec, T, keep_velocity=False)
        return np.sqrt(np.mean((a.data - b.data) ** 2)) / np.sqrt(np.mean(a.data**2))

    assert gap(8e-6) < 0.01
    assert gap(10 * SCHEME.dt) < 0.005


def test_backend_gap_shrinks_with_refinement():
    gaps = []
    for nx in (20, 40):
        mesh = rectangle_quads(10e-3, 6e-3, nx, int(0.6 * nx))
        field = DensityField(np.ones(mesh.n_nodes))
        rec = ReceiverArray(mesh.boundary_nodes()[::2])
        src = [SourceSignal(int(mesh.boundary_nodes()[0]))]
        a, _ = run_forward(assemble_global(mesh, field, SCHEME, "lowfreq"), src, rec, 8e-6, keep_velocity=False)
        b, _ = run_forward(assemble_global(mesh, field, SCHEME, "radial", RadialStations(40)), src, rec, 8e-6,
                           keep_velocity=False)
        gaps.append(np.sqrt(np.mean((a.data - b.data) ** 2)) / np.sqrt(np.mean(a.data**2)))
    assert gaps[1] < gaps[0] / 2.5


def test_arrival_time():
    mesh = rectangle_quads(24e-3, 12e-3, 96, 48)
    system = assemble_global(mesh, DensityField(np.ones(mesh.n_nodes)), SCHEME, "lowfreq")
    src = int(snap_to_nodes(mesh, [(6e-3, 12e-3)])[0][0])
    rec = int(snap_to_nodes(mesh, [(18e-3, 12e-3)])[0][0])
    tr, _ = run_forward(system, [SourceSignal(src)], ReceiverArray([rec]), 4e-6, keep_velocity=False)
    u = np.abs(tr.data[0, :, 0])
    onset = tr.time[np.argmax(u > 1e-3 * u.max())]
    assert onset == pytest.approx(2.0e-6, abs=2 * SCHEME.dt)


def test_parallel_sources_match_serial(plate):
    mesh, field = plate
    system = assemble_global(mesh, field, SCHEME, "radial", STATIONS)
    srcs = [SourceSignal(0), SourceSignal(int(mesh.boundary_nodes()[7]), f0=4e5)]
    rec = ReceiverArray(mesh.boundary_nodes()[::4])
    serial, _ = run_forward(system, srcs, rec, 6e-6)
    with ThreadPoolExecutor(2) as ex:
        threaded, _ = run_forward(system, srcs, rec, 6e-6, executor=ex)
    np.testing.assert_array_equal(serial.data, threaded.data)


def test_step_rejects_non_finite(plate):
    mesh, field = plate
    system = assemble_global(mesh, field, SCHEME, "lowfreq")
    f = np.zeros(mesh.n_nodes)
    f[0] = np.inf
    with pytest.raises(SolverError):
        step(WaveState.zeros(system), system, f)


def test_unknown_backend():
    mesh = rectangle_quads(1e-3, 1e-3, 1, 1)
    with pytest.raises(ValueError):
        assemble_global(mesh, DensityField(np.ones(4)), SCHEME, "spectral")
    with pytest.raises(ValueError):
        assemble_global(mesh, DensityField(np.ones(4)), SCHEME, "radial")
