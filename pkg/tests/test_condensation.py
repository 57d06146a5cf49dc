import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_group
from sbfwi.coefficients import CoefficientSet, DensityField, RadialStations, assemble_coefficients
from sbfwi.condensation import (
    BlockTridiagonalSystem,
    ElementState,
    TimeScheme,
    build_blocks,
    central_difference,
    condense,
    dense_system,
    recover_interior,
    residual_source,
    sweep_rhs,
    update_time_derivatives,
)

SCHEME = TimeScheme(2e-7)


def element(seed, m=5, n=4):
    rng = np.random.default_rng(seed)
    _, g = random_group(rng, m)
    cs = assemble_coefficients(g, DensityField(rng.uniform(0.3, 1.7, m)), RadialStations(n))
    return rng, cs


def single(blocks, k=0):
    return BlockTridiagonalSystem(blocks.theta[k], blocks.phi[k], blocks.psi[k], blocks.h)


def test_constant_density_block_sum():
    _, g = random_group(np.random.default_rng(3), 5)
    cs = assemble_coefficients(g, DensityField(np.ones(5)), RadialStations(4))
    b = build_blocks(cs, SCHEME)
    xi = cs.stations.xi[:, None, None]
    np.testing.assert_allclose(b.theta[0, 1:-1] + b.psi[0, 1:-1], 2 * xi**2 * cs.E0[0] / cs.stations.h**2, rtol=1e-12)


def test_ghost_rows():
    _, cs = element(1)
    b = build_blocks(cs, SCHEME)
    xi0, h = cs.stations.xi[0], cs.stations.h
    np.testing.assert_allclose(b.theta[0, 0], -xi0 * cs.E0[0, 0] / (2 * h))
    np.testing.assert_allclose(b.phi[0, 0], cs.E1[0, 0].T)
    np.testing.assert_allclose(b.psi[0, 0], xi0 * cs.E0[0, 0] / (2 * h))


def test_large_dt_gives_static_blocks():
    _, cs = element(2)
    slow = build_blocks(cs, TimeScheme(1e6))
    static = build_blocks(cs, None)
    np.testing.assert_allclose(slow.phi, static.phi, rtol=1e-12, atol=1e-12 * np.abs(static.phi).max())


@pytest.mark.parametrize(
    "u, xi, d1, d2",
    [(lambda x: 1 + 2 * x, 0.3, 2.0, 0.0), (lambda x: x**2, 0.5, 1.0, 2.0)],
)
def test_central_difference_exact_cases(u, xi, d1, d2):
    h = 0.1
    a, b = central_difference(u(xi - h), u(xi), u(xi + h), h)
    assert a == pytest.approx(d1) and b == pytest.approx(d2, abs=1e-10)


def test_central_difference_second_order():
    c = np.random.default_rng(0).standard_normal(4)

    def err(h):
        u = lambda x: np.polyval(c, x)
        return abs(central_difference(u(0.4 - h), u(0.4), u(0.4 + h), h)[0] - np.polyval(np.polyder(c), 0.4))

    assert err(0.02) / err(0.01) == pytest.approx(4.0, rel=1e-3)


def test_residual_source_cases():
    _, cs = element(4)
    cs = cs.element(0)
    n, m = cs.stations.n, cs.m
    assert np.all(residual_source(ElementState.zeros((n + 1, m)), cs, SCHEME) == 0)
    state = ElementState(np.ones((n + 1, m)), np.zeros((n + 1, m)), np.zeros((n + 1, m)))
    p = residual_source(state, cs, TimeScheme(1.0))
    expected = -4 * cs.stations.xi[:, None] ** 2 * np.einsum("iab,b->ia", cs.M0, np.ones(m))
    np.testing.assert_allclose(p, expected, rtol=1e-14)
    acc_only = ElementState(np.zeros((n + 1, m)), np.zeros((n + 1, m)), np.ones((n + 1, m)))
    assert np.all(residual_source(acc_only, cs, TimeScheme(1.0, beta=0.5)) == 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), m=st.integers(3, 8), n=st.sampled_from([2, 3, 5]))
def test_condensed_solve_matches_dense(seed, m, n):
    rng = np.random.default_rng(seed)
    _, g = random_group(rng, m)
    cs = assemble_coefficients(g, DensityField(rng.uniform(0.3, 1.7, m)), RadialStations(n))
    blocks = build_blocks(cs, SCHEME)
    ce = condense(blocks)
    p = rng.standard_normal((1, n + 1, m))
    f = rng.standard_normal((1, m))
    f_hat, swept = sweep_rhs(ce, p, f)
    u_n = np.linalg.solve(ce.S[0], f_hat[0])
    U = recover_interior(ce, u_n[None], swept)[0]
    A, rhs = dense_system(single(blocks), p[0], f[0])
    ref = np.linalg.solve(A, rhs).reshape(n + 3, m)
    assert np.linalg.norm(U - ref) <= 1e-10 * np.linalg.norm(ref)
    # every block row is satisfied by the recovered fields
    assert np.linalg.norm(A @ U.ravel() - rhs) <= 1e-9 * np.linalg.norm(A) * np.linalg.norm(U)


def test_zero_sources_sweep():
    _, cs = element(5)
    ce = condense(build_blocks(cs, SCHEME))
    n, m = cs.stations.n, cs.m
    p = np.zeros((1, n + 1, m))
    f_hat, swept = sweep_rhs(ce, p)
    assert np.all(f_hat == 0)
    f = np.arange(m, dtype=float)[None]
    np.testing.assert_array_equal(sweep_rhs(ce, p, f)[0], f)
    assert np.all(recover_interior(ce, np.zeros((1, m)), swept) == 0)


def test_decoupled_scalar_thomas():
    # m = 1 blocks: the condensation is an ordinary scalar Schur complement
    rng = np.random.default_rng(8)
    n = 6
    theta, phi, psi = (rng.uniform(0.5, 1.5, (n + 3, 1, 1)) for _ in range(3))
    phi[1:-1] += 4.0
    sys_ = BlockTridiagonalSystem(theta, phi, psi, 0.1)
    S = condense(sys_).S[0, 0]
    A, _ = dense_system(sys_, np.zeros((n + 1, 1)), np.zeros(1))
    # S maps u_n to the load on the last row when every other row is homogeneous
    k = n + 1
    for val in (1.0, -2.5):
        u = np.linalg.solve(A, np.concatenate([np.zeros(n + 2), [val]]))
        assert S * u[k] == pytest.approx(val, rel=1e-12)


def test_static_constant_field_recovered():
    rng = np.random.default_rng(6)
    _, g = random_group(rng, 6)
    for n in (10, 40):
        cs = assemble_coefficients(g, DensityField(np.ones(6)), RadialStations(n))
        ce = condense(build_blocks(cs, None))
        _, swept = sweep_rhs(ce, np.zeros((1, n + 1, 6)))
        U = recover_interior(ce, np.ones((1, 6)), swept)[0]
        np.testing.assert_allclose(U[1 : n + 2], 1.0, atol=1e-8)
        np.testing.assert_allclose(ce.S[0] @ np.ones(6), 0.0, atol=1e-8 * np.abs(ce.S).max())


def test_newmark_update_cases():
    s = TimeScheme(1.0)
    zero = ElementState(np.zeros(1), np.zeros(1), np.zeros(1))
    new = update_time_derivatives(zero, np.ones(1), s)
    assert new.v[0] == pytest.approx(2.0) and new.a[0] == pytest.approx(4.0)
    still = update_time_derivatives(zero, np.zeros(1), s)
    assert still.v[0] == 0 and still.a[0] == 0
    moving = ElementState(np.array([3.0]), np.array([1.5]), np.zeros(1))
    nxt = update_time_derivatives(moving, np.array([3.0 + 1.5]), s)
    assert nxt.v[0] == pytest.approx(1.5) and nxt.a[0] == pytest.approx(0.0, abs=1e-14)


def test_reuse_is_bitwise_identical():
    rng, cs = element(9, n=3)
    blocks = build_blocks(cs, SCHEME)
    ce = condense(blocks)
    n, m = cs.stations.n, cs.m
    state = ElementState.zeros((1, n + 1, m))
    state_b = ElementState.zeros((1, n + 1, m))
    one = cs.element(0)
    for _ in range(100):
        f = rng.standard_normal((1, m))
        outs = []
        for st_, cond in ((state, ce), (state_b, condense(build_blocks(cs, SCHEME)))):
            p = residual_source(ElementState(st_.u[0], st_.v[0], st_.a[0]), one, SCHEME)[None]
            f_hat, swept = sweep_rhs(cond, p, f)
            u_n = np.linalg.solve(cond.S[0], f_hat[0])
            U = recover_interior(cond, u_n[None], swept)
            outs.append(update_time_derivatives(st_, U[:, 1 : n + 2], SCHEME))
        state, state_b = outs
        assert np.array_equal(state.u, state_b.u)
    assert np.abs(state.u).max() > 0


def test_zero_input_keeps_element_at_rest():
    _, cs = element(10, n=3)
    ce = condense(build_blocks(cs, SCHEME))
    n, m = cs.stations.n, cs.m
    state = ElementState.zeros((n + 1, m))
    for _ in range(50):
        p = residual_source(state, cs.element(0), SCHEME)[None]
        f_hat, swept = sweep_rhs(ce, p)
        U = recover_interior(ce, np.linalg.solve(ce.S[0], f_hat[0])[None], swept)[0]
        state = update_time_derivatives(state, U[1 : n + 2], SCHEME)
    assert not state.u.any() and not state.v.any() and not state.a.any()


def test_batched_matches_single():
    _, cs = element(11)
    ce_all = condense(build_blocks(cs, SCHEME))
    one = cs.element(0)
    assert isinstance(one, CoefficientSet)
    ce_one = condense(build_blocks(one, SCHEME))
    np.testing.assert_allclose(ce_all.S[0], ce_one.S, rtol=1e-13)
