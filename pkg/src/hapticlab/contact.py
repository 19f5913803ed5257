"""Voxel-map god-object contact and energy bookkeeping.

The proxy lives in free space: when the tool end enters an occupied voxel the
proxy is the nearest free voxel center (deterministic lexicographic
tie-break). For force computation the proxy is refined onto the surface of
that free voxel (the tool end clamped into the free cube), which makes the
contact force continuous across voxel faces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class ContactError(ValueError):
    """Invalid grid or contact parameters."""


@dataclass(frozen=True)
class VoxelGrid:
    """Dense occupancy grid with uniform spacing.

    ``labels`` optionally carries a material id per voxel (0 = free); when
    given, ``occupancy`` is ``labels > 0``.
    """

    origin: np.ndarray
    spacing: float
    dims: tuple
    occupancy: np.ndarray
    labels: np.ndarray = None

    BLOCK = 8

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ContactError("dims must be three positive counts")
        if not self.spacing > 0:
            raise ContactError("spacing must be positive")
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.shape != dims:
            raise ContactError(f"occupancy shape {occ.shape} != dims {dims}")
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        occ = occ.copy()
        occ.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "occupancy", occ)
        object.__setattr__(self, "spacing", float(self.spacing))
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.uint8).copy()
            if lab.shape != dims or np.any((lab > 0) != occ):
                raise ContactError("labels must match occupancy")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    def center(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=float) + 0.5) * self.spacing

    def voxel_of(self, p):
        """Voxel index containing ``p`` or ``None`` outside the grid."""
        idx = np.floor((np.asarray(p, dtype=float) - self.origin) / self.spacing).astype(np.int64)
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.dims)):
            return None
        return tuple(int(i) for i in idx)

    def is_occupied(self, p) -> bool:
        idx = self.voxel_of(p)
        return idx is not None and bool(self.occupancy[idx])

    @cached_property
    def _blocks(self):
        """Per-block lists of free voxel indices (flat C order) for the coarse pass."""
        B = self.BLOCK
        nb = tuple(-(-d // B) for d in self.dims)
        free = np.flatnonzero(~self.occupancy.ravel())
        if free.size == 0:
            return nb, {}, np.zeros((0, 3), dtype=np.int64)
        ijk = np.stack(np.unravel_index(free, self.dims), axis=1)
        bid = (ijk[:, 0] // B * nb[1] + ijk[:, 1] // B) * nb[2] + ijk[:, 2] // B
        order = np.argsort(bid, kind="stable")
        bid_sorted = bid[order]
        starts = np.flatnonzero(np.r_[True, bid_sorted[1:] != bid_sorted[:-1]])
        ends = np.r_[starts[1:], len(order)]
        groups = {int(bid_sorted[s]): free[order[s:e]] for s, e in zip(starts, ends)}
        keys = np.array(sorted(groups), dtype=np.int64)
        bijk = np.stack(np.unravel_index(keys, nb), axis=1)
        return nb, groups, np.column_stack([keys, bijk])


def _sq_dist(grid: VoxelGrid, flat_idx: np.ndarray, p: np.ndarray) -> np.ndarray:
    i, j, k = np.unravel_index(flat_idx, grid.dims)
    dx = grid.origin[0] + (i + 0.5) * grid.spacing - p[0]
    dy = grid.origin[1] + (j + 0.5) * grid.spacing - p[1]
    dz = grid.origin[2] + (k + 0.5) * grid.spacing - p[2]
    return dx * dx + dy * dy + dz * dz


def nearest_free_center(grid: VoxelGrid, p) -> tuple:
    """Index of the free voxel whose center is nearest to ``p``.

    Coarse-to-fine search: blocks of ``BLOCK^3`` voxels are visited in order
    of a lower bound on their distance to ``p``; the scan stops once that bound
    exceeds the best squared distance found. Ties resolve to the smallest
    C-order (lexicographic) index.
    """
    p = np.asarray(p, dtype=float)
    nb, groups, table = grid._blocks
    if not groups:
        raise ContactError("grid has no free voxel: empty admissible set")
    B = grid.BLOCK * grid.spacing
    lo = grid.origin + table[:, 1:] * B
    hi = lo + B
    gap = np.maximum(np.maximum(lo - p, p - hi), 0.0)
    bound = np.einsum("ij,ij->i", gap, gap)
    order = np.argsort(bound, kind="stable")
    best_d, best_i = math.inf, -1
    # slack absorbs rounding between the bound and the exact center distances
    slack = 1e-9 * grid.spacing * grid.spacing
    for b in order:
        if bound[b] > best_d + slack:
            break
        cand = groups[int(table[b, 0])]
        d = _sq_dist(grid, cand, p)
        m = d.min()
        if m < best_d or (m == best_d):
            sel = cand[d == m].min()
            if m < best_d or sel < best_i:
                best_d, best_i = float(m), int(sel)
    return tuple(int(v) for v in np.unravel_index(best_i, grid.dims))


def nearest_surface_point(grid: VoxelGrid, p_end) -> np.ndarray:
    """God-object proxy for the tool end.

    Returns ``p_end`` itself when it lies in free space (inside the grid in a
    free voxel, or outside the grid); otherwise the center of the nearest free
    voxel.
    """
    p = np.asarray(p_end, dtype=float).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ContactError("p_end must be finite")
    if not grid.is_occupied(p):
        return p.copy()
    return grid.center(nearest_free_center(grid, p))


def surface_proxy(grid: VoxelGrid, p_end) -> np.ndarray:
    """Proxy refined onto the boundary of the nearest free voxel.

    The tool end is clamped into the cube of the voxel returned by
    :func:`nearest_free_center`, i.e. projected onto its face, edge or corner.
    """
    p = np.asarray(p_end, dtype=float).reshape(3)
    if not grid.is_occupied(p):
        return p.copy()
    idx = np.asarray(nearest_free_center(grid, p), dtype=float)
    lo = grid.origin + idx * grid.spacing
    return np.clip(p, lo, lo + grid.spacing)


@dataclass(frozen=True)
class ContactParams:
    k: float = 1000.0
    b: float = 5.0
    tool_mass: float = 0.05
    dt: float = 1e-3

    def __post_init__(self):
        if not self.k > 0:
            raise ContactError("k must be positive")
        if not self.b >= 0:
            raise ContactError("b must be non-negative")
        if not self.tool_mass > 0:
            raise ContactError("tool_mass must be positive")
        if not self.dt > 0:
            raise ContactError("dt must be positive")

    @property
    def in_passivity_regime(self) -> bool:
        return self.dt <= 1e-3 and self.b > 0


def contact_force(p_proxy, p_end, v_end, params: ContactParams) -> np.ndarray:
    """Spring to the proxy plus dissipative damping: ``k (p_proxy - p_end) - b v_end``."""
    p_proxy = np.asarray(p_proxy, dtype=float)
    p_end = np.asarray(p_end, dtype=float)
    v_end = np.asarray(v_end, dtype=float)
    return params.k * (p_proxy - p_end) - params.b * v_end


@dataclass(frozen=True)
class EnergyTrace:
    energy: np.ndarray

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.energy)


def contact_energy(p_proxy, p_end, v_end, params: ContactParams) -> float:
    d = np.asarray(p_proxy, dtype=float) - np.asarray(p_end, dtype=float)
    v = np.asarray(v_end, dtype=float)
    return 0.5 * params.k * float(d @ d) + 0.5 * params.tool_mass * float(v @ v)


@dataclass(frozen=True)
class PassivityVerdict:
    passive: bool
    max_increment: float


def passivity_check(trace: EnergyTrace, tolerance: float = 1e-9) -> PassivityVerdict:
    inc = trace.increments
    worst = float(inc.max()) if inc.size else 0.0
    return PassivityVerdict(worst <= tolerance, worst)


@dataclass(frozen=True)
class BounceResult:
    positions: np.ndarray
    velocities: np.ndarray
    forces: np.ndarray
    trace: EnergyTrace


def simulate_bounce(grid: VoxelGrid, params: ContactParams, p0, v0, duration: float,
                    scheme: str = "semi_implicit", max_iter: int = 30) -> BounceResult:
    """Free flight and contact of a point tool against a voxel map (no gravity).

    ``scheme="semi_implicit"`` treats the spring and damper implicitly with the
    proxy updated by fixed-point iteration within the tick; ``"explicit"``
    evaluates the force at the start of the tick and then updates velocity
    before position (symplectic Euler).
    """
    if scheme not in ("semi_implicit", "explicit"):
        raise ContactError(f"unknown scheme {scheme!r}")
    dt, m, k, b = params.dt, params.tool_mass, params.k, params.b
    n = int(round(duration / dt))
    p = np.asarray(p0, dtype=float).copy()
    v = np.asarray(v0, dtype=float).copy()
    P = np.empty((n + 1, 3))
    V = np.empty((n + 1, 3))
    F = np.empty((n + 1, 3))
    E = np.empty(n + 1)

    def record(i, p, v):
        q = surface_proxy(grid, p)
        P[i], V[i] = p, v
        F[i] = contact_force(q, p, v, params) if np.any(q != p) else 0.0
        E[i] = contact_energy(q, p, v, params)

    record(0, p, v)
    for i in range(1, n + 1):
        if scheme == "explicit":
            q = surface_proxy(grid, p)
            f = contact_force(q, p, v, params) if np.any(q != p) else np.zeros(3)
            v = v + dt * f / m
            p = p + dt * v
        else:
            p_free = p + dt * v
            if not grid.is_occupied(p_free):
                p = p_free
            else:
                q = surface_proxy(grid, p_free)
                den = m + dt * b + dt * dt * k
                for _ in range(max_iter):
                    v_new = (m * v + dt * k * (q - p)) / den
                    p_new = p + dt * v_new
                    q_new = surface_proxy(grid, p_new)
                    if np.array_equal(q_new, q):
                        break
                    q = q_new
                if np.array_equal(q_new, p_new):
                    # the implicit step leaves the tissue; take the free-space limit
                    v_new = (m * v + dt * k * (q - p)) / den
                    p_new = p + dt * v_new
                p, v = p_new, v_new
        record(i, p, v)
    return BounceResult(P, V, F, EnergyTrace(E))


def cavity_grid(n: int = 32, spacing: float = 1e-3, cavity: int = 16) -> VoxelGrid:
    """Solid block with a centered cubic free cavity of ``cavity`` voxels per side."""
    occ = np.ones((n, n, n), dtype=bool)
    s = (n - cavity) // 2
    occ[s:s + cavity, s:s + cavity, s:s + cavity] = False
    return VoxelGrid(origin=np.zeros(3), spacing=spacing, dims=(n, n, n), occupancy=occ)


def slab_grid(dims=(32, 32, 32), spacing: float = 1e-4, thickness: int = 8,
              origin=None) -> VoxelGrid:
    """Occupied slab filling the lowest ``thickness`` z-layers."""
    occ = np.zeros(dims, dtype=bool)
    occ[:, :, :thickness] = True
    if origin is None:
        origin = (0.0, 0.0, -thickness * spacing)
    return VoxelGrid(origin=np.asarray(origin, float), spacing=spacing, dims=tuple(dims), occupancy=occ)


def sphere_grid(n: int = 32, spacing: float = 1e-4, radius: float = None) -> VoxelGrid:
    """Occupied ball centered in a cube of ``n`` voxels per side."""
    radius = 0.35 * n * spacing if radius is None else radius
    c = (np.arange(n) + 0.5) * spacing - 0.5 * n * spacing
    X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
    occ = X ** 2 + Y ** 2 + Z ** 2 <= radius ** 2
    return VoxelGrid(origin=np.full(3, -0.5 * n * spacing), spacing=spacing, dims=(n, n, n), occupancy=occ)


def two_layer_phantom(dims=(32, 32, 32), spacing: float = 1e-4, top: int = 6,
                      bottom: int = 10) -> VoxelGrid:
    """Two stacked tissue layers (label 1 soft on top, label 2 stiff below)."""
    lab = np.zeros(dims, dtype=np.uint8)
    lab[:, :, :bottom] = 2
    lab[:, :, bottom:bottom + top] = 1
    origin = (0.0, 0.0, -(top + bottom) * spacing)
    return VoxelGrid(origin=np.asarray(origin, float), spacing=spacing, dims=tuple(dims),
                     occupancy=lab > 0, labels=lab)


def _rle(values: np.ndarray):
    flat = values.ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    starts = np.r_[0, change]
    lengths = np.diff(np.r_[starts, flat.size])
    return [(int(flat[s]), int(n)) for s, n in zip(starts, lengths)]


def save_grid(grid: VoxelGrid, path) -> None:
    """Flat text: dims, origin, spacing header then ``value count`` runs in C order."""
    values = grid.labels if grid.labels is not None else grid.occupancy.astype(np.uint8)
    runs = _rle(values)
    lines = ["voxel-grid 1",
             "dims " + " ".join(str(d) for d in grid.dims),
             "origin " + " ".join(f"{v:.17g}" for v in grid.origin),
             f"spacing {grid.spacing:.17g}",
             f"labels {1 if grid.labels is not None else 0}",
             f"runs {len(runs)}"]
    lines += [f"{v} {n}" for v, n in runs]
    Path(path).write_text("\n".join(lines) + "\n")


def load_grid(path) -> VoxelGrid:
    rows = Path(path).read_text().split("\n")
    if not rows[0].startswith("voxel-grid"):
        raise ContactError("not a voxel grid file")
    dims = tuple(int(v) for v in rows[1].split()[1:])
    origin = np.array([float(v) for v in rows[2].split()[1:]])
    spacing = float(rows[3].split()[1])
    has_labels = rows[4].split()[1] == "1"
    nruns = int(rows[5].split()[1])
    vals, counts = [], []
    for r in rows[6:6 + nruns]:
        v, c = r.split()
        vals.append(int(v))
        counts.append(int(c))
    flat = np.repeat(np.array(vals, dtype=np.uint8), counts)
    if flat.size != int(np.prod(dims)):
        raise ContactError("run lengths do not cover the grid")
    data = flat.reshape(dims)
    return VoxelGrid(origin, spacing, dims, data > 0, data if has_labels else None)
