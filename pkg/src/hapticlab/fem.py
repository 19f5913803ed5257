"""Small linear-elastic finite elements: two-node bars and plane-stress triangles."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve


class FemError(ValueError):
    """Invalid mesh, material or singular system."""


@dataclass(frozen=True)
class Material:
    youngs_modulus: float
    section: float = 1.0  # cross-section (m^2) for bars, thickness (m) for triangles
    poisson_ratio: float = 0.3

    def __post_init__(self):
        if not self.youngs_modulus > 0:
            raise FemError("youngs_modulus must be positive")
        if not self.section > 0:
            raise FemError("section must be positive")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise FemError("poisson_ratio must be in [0, 0.5)")

    def plane_stress(self) -> np.ndarray:
        E, nu = self.youngs_modulus, self.poisson_ratio
        return E / (1 - nu * nu) * np.array([[1.0, nu, 0.0],
                                             [nu, 1.0, 0.0],
                                             [0.0, 0.0, 0.5 * (1 - nu)]])


@dataclass(frozen=True)
class Mesh:
    """Nodes (n, dim) with dim 1 (bars) or 2 (triangles); elements as index rows.

    ``constraints`` lists fixed degrees of freedom (node * dim + component).
    """

    nodes: np.ndarray
    elements: np.ndarray
    constraints: tuple = ()

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        elements = np.asarray(self.elements, dtype=np.int64)
        if nodes.shape[1] not in (1, 2):
            raise FemError("nodes must be 1-D or 2-D coordinates")
        expected = nodes.shape[1] + 1
        if elements.ndim != 2 or elements.shape[1] != expected:
            raise FemError(f"elements must have {expected} nodes each")
        if elements.size and (elements.min() < 0 or elements.max() >= len(nodes)):
            raise FemError("element index out of range")
        cons = tuple(sorted({int(c) for c in self.constraints}))
        if cons and (cons[0] < 0 or cons[-1] >= nodes.size):
            raise FemError("constraint dof out of range")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "constraints", cons)
        for e in range(len(elements)):
            if not self.element_measure(e) > 0:
                raise FemError(f"degenerate element {e}")

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_dof(self) -> int:
        return self.nodes.size

    def element_measure(self, e: int) -> float:
        """Length of a bar or signed-area magnitude of a triangle."""
        x = self.nodes[self.elements[e]]
        if self.dim == 1:
            return abs(x[1, 0] - x[0, 0])
        return 0.5 * abs((x[1, 0] - x[0, 0]) * (x[2, 1] - x[0, 1])
                         - (x[2, 0] - x[0, 0]) * (x[1, 1] - x[0, 1]))


@dataclass
class StiffnessSystem:
    K: np.ndarray
    f: np.ndarray = None
    u: np.ndarray = None

    def __post_init__(self):
        if self.f is None:
            self.f = np.zeros(self.K.shape[0])


def bar_element(length: float, material: Material) -> np.ndarray:
    s = material.youngs_modulus * material.section / length
    return s * np.array([[1.0, -1.0], [-1.0, 1.0]])


def triangle_element(xy: np.ndarray, material: Material) -> np.ndarray:
    """Constant-strain triangle stiffness ``t A B^T D B`` (6 x 6)."""
    (x1, y1), (x2, y2), (x3, y3) = xy
    area2 = (x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1)
    b = np.array([y2 - y3, y3 - y1, y1 - y2]) / area2
    c = np.array([x3 - x2, x1 - x3, x2 - x1]) / area2
    B = np.zeros((3, 6))
    B[0, 0::2] = b
    B[1, 1::2] = c
    B[2, 0::2] = c
    B[2, 1::2] = b
    return material.section * 0.5 * abs(area2) * (B.T @ material.plane_stress() @ B)


def assemble_stiffness(mesh: Mesh, material: Material) -> StiffnessSystem:
    n = mesh.n_dof
    if n > 5000:
        raise FemError("dense assembly is limited to a few thousand dofs")
    K = np.zeros((n, n))
    d = mesh.dim
    for e, conn in enumerate(mesh.elements):
        if d == 1:
            ke = bar_element(mesh.element_measure(e), material)
            dofs = conn
        else:
            ke = triangle_element(mesh.nodes[conn], material)
            dofs = np.column_stack([2 * conn, 2 * conn + 1]).ravel()
        K[np.ix_(dofs, dofs)] += ke
    return StiffnessSystem(K)


def solve_displacement(system: StiffnessSystem, constraints=(), f=None) -> np.ndarray:
    """Solve ``K u = f`` with the listed dofs fixed at zero (row/column elimination)."""
    K = system.K
    f = system.f if f is None else np.asarray(f, dtype=float)
    n = K.shape[0]
    fixed = np.zeros(n, dtype=bool)
    fixed[list(constraints)] = True
    free = np.flatnonzero(~fixed)
    u = np.zeros(n)
    if free.size:
        Kr = K[np.ix_(free, free)]
        try:
            factor = cho_factor(Kr, lower=True)
        except LinAlgError as exc:
            raise FemError("reduced stiffness is singular: add constraints") from exc
        # a pivot at rounding level means a rigid-body mode survived
        piv = np.abs(np.diag(factor[0]))
        if piv.min() <= 1e-7 * piv.max():
            raise FemError("reduced stiffness is singular: add constraints")
        u[free] = cho_solve(factor, f[free])
    system.f = f
    system.u = u
    return u


def bar_mesh(length: float = 0.1, n_elements: int = 4, fixed_left: bool = True) -> Mesh:
    x = np.linspace(0.0, length, n_elements + 1)
    el = np.column_stack([np.arange(n_elements), np.arange(1, n_elements + 1)])
    return Mesh(x, el, (0,) if fixed_left else ())


def plate_mesh(width: float = 0.02, height: float = 0.01, nx: int = 4, ny: int = 2,
               clamp_left: bool = True) -> Mesh:
    """Structured rectangle split into right triangles; optionally clamp the x=0 edge."""
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(nx + 1, ny + 1)
    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b, c, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            tris += [(a, b, c), (a, c, d)]
    cons = ()
    if clamp_left:
        left = idx[0]
        cons = tuple(np.column_stack([2 * left, 2 * left + 1]).ravel())
    return Mesh(nodes, np.array(tris), cons)


def write_mesh(mesh: Mesh, path) -> None:
    lines = [f"nodes {len(mesh.nodes)} {mesh.dim}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in mesh.nodes]
    lines.append(f"elements {len(mesh.elements)}")
    lines += [" ".join(str(v) for v in row) for row in mesh.elements]
    lines.append(f"constraints {len(mesh.constraints)}")
    lines += [str(c) for c in mesh.constraints]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    rows = [r for r in Path(path).read_text().split("\n") if r.strip()]
    head = rows[0].split()
    n, d = int(head[1]), int(head[2])
    nodes = np.array([[float(v) for v in r.split()] for r in rows[1:1 + n]]).reshape(n, d)
    pos = 1 + n
    ne = int(rows[pos].split()[1])
    elements = np.array([[int(v) for v in r.split()] for r in rows[pos + 1:pos + 1 + ne]],
                        dtype=np.int64).reshape(ne, d + 1)
    pos += 1 + ne
    nc = int(rows[pos].split()[1])
    cons = tuple(int(r) for r in rows[pos + 1:pos + 1 + nc])
    return Mesh(nodes, elements, cons)


def write_solution_csv(mesh: Mesh, u: np.ndarray, path) -> None:
    comps = ["ux"] if mesh.dim == 1 else ["ux", "uy"]
    coords = ["x"] if mesh.dim == 1 else ["x", "y"]
    U = np.asarray(u).reshape(len(mesh.nodes), mesh.dim)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + coords + comps)
        for i, (xy, uu) in enumerate(zip(mesh.nodes, U)):
            w.writerow([i] + [f"{v:.12g}" for v in xy] + [f"{v:.12g}" for v in uu])
