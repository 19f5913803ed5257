"""Verifier suites for the finite-element and contact modules.

Each suite returns a list of :class:`Check` results; the command line prints
them as PASS/FAIL lines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..contact import (ContactParams, VoxelGrid, cavity_grid, nearest_surface_point,
                       passivity_check, simulate_bounce)
from ..fem import Material, assemble_stiffness, bar_mesh, plate_mesh, solve_displacement
from .config import ContactCheckSettings, FemCheckSettings


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def symmetry_ratio(K: np.ndarray) -> float:
    """``||K - K^T||_inf / ||K||_inf`` (row-sum norms)."""
    return float(np.abs(K - K.T).sum(axis=1).max() / np.abs(K).sum(axis=1).max())


def fem_check(s: FemCheckSettings = FemCheckSettings()) -> list:
    out = []
    mat = Material(s.youngs_modulus, s.section)
    mesh = bar_mesh(s.length, s.n_elements)
    sys_ = assemble_stiffness(mesh, mat)
    f = np.zeros(mesh.n_dof)
    f[-1] = s.tip_load
    u = solve_displacement(sys_, mesh.constraints, f)
    exact = s.tip_load * s.length / (s.youngs_modulus * s.section)
    rel = abs(u[-1] - exact) / exact
    out.append(Check("bar tip deflection", rel <= 1e-9, f"u={u[-1]:.12g} FL/EA={exact:.12g} rel={rel:.2e}"))
    meshes = [("bar", mesh, mat)]
    for nx, ny in ((2, 1), (4, 2), (8, 4)):
        meshes.append((f"plate {nx}x{ny}", plate_mesh(nx=nx, ny=ny), Material(s.youngs_modulus, 1e-3)))
    for name, m, mt in meshes:
        K = assemble_stiffness(m, mt).K
        r = symmetry_ratio(K)
        out.append(Check(f"symmetry {name}", r <= 1e-12, f"||K-K^T||/||K|| = {r:.2e}"))
    # a rigid translation is stress free
    K = assemble_stiffness(meshes[-1][1], meshes[-1][2]).K
    t = np.tile([1.0, 0.0], K.shape[0] // 2)
    rb = float(np.abs(K @ t).max() / np.abs(K).max())
    out.append(Check("rigid-body null space", rb <= 1e-12, f"max|K t|/max|K| = {rb:.2e}"))
    return out


def brute_force_nearest(grid: VoxelGrid, p) -> np.ndarray:
    """Exhaustive nearest free voxel center (lowest flat index on ties)."""
    p = np.asarray(p, dtype=float)
    if not grid.is_occupied(p):
        return p.copy()
    i, j, k = np.indices(grid.dims)
    dx = grid.origin[0] + (i + 0.5) * grid.spacing - p[0]
    dy = grid.origin[1] + (j + 0.5) * grid.spacing - p[1]
    dz = grid.origin[2] + (k + 0.5) * grid.spacing - p[2]
    d = np.where(grid.occupancy, np.inf, dx * dx + dy * dy + dz * dz)
    arg = np.unravel_index(int(np.argmin(d)), grid.dims)
    return grid.center(arg)


def contact_check(s: ContactCheckSettings = ContactCheckSettings(), seed: int = 0,
                  n_grids: int = 5, grid_n: int = 16) -> list:
    out = []
    grid = cavity_grid(s.grid_size, s.spacing, s.grid_size // 2)
    c = 0.5 * s.grid_size * s.spacing
    p0 = np.array([c, c, c])
    v0 = np.array([0.08, 0.05, 0.03])
    params = ContactParams(k=s.stiffness, b=s.damping, tool_mass=s.tool_mass, dt=s.dt)
    res = simulate_bounce(grid, params, p0, v0, s.duration)
    ver = passivity_check(res.trace)
    out.append(Check("passive bounce (b>0, semi-implicit)", ver.passive,
                     f"max energy increment {ver.max_increment:.3e} J"))
    slow = ContactParams(k=s.stiffness, b=0.0, tool_mass=s.tool_mass, dt=10 * s.dt)
    res = simulate_bounce(grid, slow, p0, v0, s.duration, scheme="explicit")
    ver = passivity_check(res.trace)
    out.append(Check("rate condition demonstrated (b=0, explicit, 10x dt)", not ver.passive,
                     f"max energy increment {ver.max_increment:.3e} J"))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_grids):
        occ = rng.random((grid_n,) * 3) < rng.uniform(0.2, 0.8)
        occ.flat[rng.integers(occ.size)] = False
        g = VoxelGrid(np.zeros(3), 1e-3, (grid_n,) * 3, occ)
        for _ in range(20):
            p = rng.uniform(0, grid_n * 1e-3, 3)
            worst = max(worst, float(np.abs(nearest_surface_point(g, p) - brute_force_nearest(g, p)).max()))
    out.append(Check("nearest surface point vs exhaustive search", worst == 0.0,
                     f"max deviation {worst:.3e} m over {n_grids * 20} queries"))
    return out
