import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hapticlab.contact import (ContactError, ContactParams, EnergyTrace, VoxelGrid, cavity_grid,
                               contact_energy, contact_force, load_grid, nearest_surface_point,
                               passivity_check, save_grid, simulate_bounce, slab_grid, sphere_grid,
                               surface_proxy, two_layer_phantom)


def _loop_oracle(grid, p):
    """Nearest free voxel center by plain enumeration in C order (first minimum wins)."""
    if not grid.is_occupied(p):
        return np.asarray(p, dtype=float)
    best, arg = np.inf, None
    for i, j, k in itertools.product(*(range(d) for d in grid.dims)):
        if grid.occupancy[i, j, k]:
            continue
        dx = grid.origin[0] + (i + 0.5) * grid.spacing - p[0]
        dy = grid.origin[1] + (j + 0.5) * grid.spacing - p[1]
        dz = grid.origin[2] + (k + 0.5) * grid.spacing - p[2]
        d = dx * dx + dy * dy + dz * dz
        if d < best:
            best, arg = d, (i, j, k)
    return grid.center(arg)


def _numpy_oracle(grid, p):
    if not grid.is_occupied(p):
        return np.asarray(p, dtype=float)
    i, j, k = np.indices(grid.dims)
    dx = grid.origin[0] + (i + 0.5) * grid.spacing - p[0]
    dy = grid.origin[1] + (j + 0.5) * grid.spacing - p[1]
    dz = grid.origin[2] + (k + 0.5) * grid.spacing - p[2]
    d = np.where(grid.occupancy, np.inf, dx * dx + dy * dy + dz * dz)
    return grid.center(np.unravel_index(int(np.argmin(d)), grid.dims))


def test_free_space_point_is_its_own_proxy():
    g = slab_grid((8, 8, 8), 1e-3, 4)
    p = np.array([3e-3, 2e-3, 1e-3])
    assert np.array_equal(nearest_surface_point(g, p), p)
    assert np.array_equal(nearest_surface_point(g, [-1.0, 0, 0]), [-1.0, 0, 0])


def test_plane_example():
    g = slab_grid((8, 8, 8), 1e-3, 4)  # occupied for z < 0
    p = np.array([3.5e-3, 3.5e-3, -0.5e-3])
    q = nearest_surface_point(g, p)
    assert np.allclose(q, [3.5e-3, 3.5e-3, 0.5e-3], atol=1e-15)
    assert np.array_equal(q, _loop_oracle(g, p))


def test_tie_break_lowest_index():
    g = VoxelGrid(np.zeros(3), 1.0, (3, 1, 1), np.array([False, True, False]).reshape(3, 1, 1))
    for _ in range(3):
        assert np.array_equal(nearest_surface_point(g, [1.5, 0.5, 0.5]), [0.5, 0.5, 0.5])


def test_empty_admissible_set():
    g = VoxelGrid(np.zeros(3), 1.0, (2, 2, 2), np.ones((2, 2, 2), bool))
    with pytest.raises(ContactError):
        nearest_surface_point(g, [0.5, 0.5, 0.5])
    with pytest.raises(ContactError):
        nearest_surface_point(g, [np.nan, 0, 0])


@settings(max_examples=40)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 12), st.floats(0.05, 0.95))
def test_matches_enumeration_random_grids(seed, n, fill):
    rng = np.random.default_rng(seed)
    dims = tuple(int(v) for v in rng.integers(1, n + 1, 3))
    occ = rng.random(dims) < fill
    occ.flat[rng.integers(occ.size)] = False
    g = VoxelGrid(rng.uniform(-1, 1, 3), float(rng.uniform(1e-4, 1e-2)), dims, occ)
    for _ in range(5):
        p = g.origin + rng.uniform(0, 1, 3) * np.asarray(dims) * g.spacing
        assert np.array_equal(nearest_surface_point(g, p), _loop_oracle(g, p))


def test_matches_exhaustive_search_64():
    rng = np.random.default_rng(7)
    for g in (sphere_grid(64, 1e-4), two_layer_phantom((64, 64, 64), 1e-4, 20, 20)):
        for _ in range(25):
            p = g.origin + rng.uniform(0, 1, 3) * np.asarray(g.dims) * g.spacing
            assert np.array_equal(nearest_surface_point(g, p), _numpy_oracle(g, p))


def test_surface_proxy_on_voxel_boundary():
    g = slab_grid((8, 8, 8), 1e-3, 4)
    q = surface_proxy(g, [3.2e-3, 3.7e-3, -0.3e-3])
    assert np.allclose(q, [3.2e-3, 3.7e-3, 0.0], atol=1e-15)


def test_force_examples():
    par = ContactParams(k=1000.0, b=0.0)
    assert np.array_equal(contact_force([0, 0, 0], [0, 0, 0], [0, 0, 0], par), np.zeros(3))
    assert np.allclose(contact_force([0, 0, 0], [0, 0, -1e-3], [0, 0, 0], par), [0, 0, 1.0])
    par = ContactParams(k=1000.0, b=5.0)
    f = contact_force([0, 0, 0], [0, 0, 0], [0, 0, -0.1], par)
    assert np.allclose(f, [0, 0, 0.5])


@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.floats(0, 1), st.floats(0, 1))
def test_force_continuous_on_segment(d, s, t):
    par = ContactParams()
    a = np.asarray(d) * 1e-3
    fs = contact_force(np.zeros(3), s * a, np.zeros(3), par)
    ft = contact_force(np.zeros(3), t * a, np.zeros(3), par)
    assert np.linalg.norm(fs - ft) <= par.k * abs(s - t) * np.linalg.norm(a) * (1 + 1e-12) + 1e-15


def test_params_validation():
    for kw in ({"k": 0.0}, {"b": -1.0}, {"tool_mass": 0.0}, {"dt": 0.0}):
        with pytest.raises(ContactError):
            ContactParams(**kw)
    assert ContactParams().in_passivity_regime
    assert not ContactParams(dt=1e-2).in_passivity_regime


def test_static_tool_is_passive():
    g = cavity_grid(8, 1e-3, 4)
    res = simulate_bounce(g, ContactParams(), [4e-3] * 3, [0, 0, 0], 0.5)
    assert np.all(res.trace.increments == 0.0)
    assert passivity_check(res.trace).passive


def test_energy_formula_and_verdict():
    par = ContactParams(k=200.0, tool_mass=0.5)
    assert contact_energy([0, 0, 1e-2], [0, 0, 0], [0, 2.0, 0], par) == pytest.approx(0.01 + 1.0)
    assert not passivity_check(EnergyTrace(np.array([1.0, 1.0 + 1e-6]))).passive
    assert passivity_check(EnergyTrace(np.array([1.0, 1.0 + 1e-10]))).passive


def test_damped_bounce_passive_and_undamped_coarse_not():
    g = cavity_grid(32, 1e-3, 16)
    p0, v0 = [16e-3] * 3, [0.08, 0.05, 0.03]
    res = simulate_bounce(g, ContactParams(k=1000, b=5, tool_mass=0.05, dt=1e-3), p0, v0, 10.0)
    v = passivity_check(res.trace)
    assert v.passive and v.max_increment <= 1e-9
    assert np.max(np.linalg.norm(res.forces, axis=1)) > 0  # contact actually happened
    res = simulate_bounce(g, ContactParams(k=1000, b=0, tool_mass=0.05, dt=1e-2), p0, v0, 10.0,
                          scheme="explicit")
    assert not passivity_check(res.trace).passive
    with pytest.raises(ContactError):
        simulate_bounce(g, ContactParams(), p0, v0, 0.1, scheme="rk4")


def test_grid_roundtrip(tmp_path):
    for g in (sphere_grid(10, 1e-4), two_layer_phantom((6, 5, 12), 1e-4, 3, 4)):
        save_grid(g, tmp_path / "g.txt")
        h = load_grid(tmp_path / "g.txt")
        assert h.dims == g.dims and h.spacing == g.spacing
        assert np.array_equal(h.origin, g.origin) and np.array_equal(h.occupancy, g.occupancy)
        assert (h.labels is None) == (g.labels is None)
    (tmp_path / "x.txt").write_text("hello\n")
    with pytest.raises(ContactError):
        load_grid(tmp_path / "x.txt")


def test_grid_validation():
    with pytest.raises(ContactError):
        VoxelGrid(np.zeros(3), 1.0, (2, 2), np.zeros((2, 2), bool))
    with pytest.raises(ContactError):
        VoxelGrid(np.zeros(3), 0.0, (2, 2, 2), np.zeros((2, 2, 2), bool))
    with pytest.raises(ContactError):
        VoxelGrid(np.zeros(3), 1.0, (2, 2, 2), np.zeros((2, 2, 3), bool))
