"""Ground-truth tool-tissue plants for the three canonical tasks.

Every plant has the same one-dimensional state layout ``(position, velocity,
deformation)`` along the tool axis, with positive position meaning deeper
into the tissue. The tool is a point mass driven by a scalar command force
``u``. Interaction forces are treated implicitly (backward Euler on the
contact/tissue terms) while the command and the process noise enter
explicitly; this keeps every conservative-plus-dissipative contact passive at
any step size and converges at first order.

Plants
------
T1 palpation
    A probe tip of stiffness ``contact_stiffness`` pressing on a cubic-hardening
    Kelvin-Voigt tissue element. The tissue indentation ``delta`` is a genuine
    state obeying ``b*d(delta)/dt = k_c*(p - delta)_+ - k1*delta - k2*delta**3``.
T2 rigid wall
    Unilateral spring-damper wall at ``wall_position``; the deformation state is
    the current penetration.
T3 bone milling
    Material is removed when the tool advances past the current cut depth.
    The resistance is ``c * density * depth * cut_rate`` with the cut rate equal
    to the feed rate while the tool is at the cutting face.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Callable, NamedTuple, Sequence, Union

import numpy as np
from scipy.linalg import expm

STATE_NAMES = ("position", "velocity", "deformation")
POS, VEL, DEF = 0, 1, 2


class TaskId(str, Enum):
    T1 = "T1_palpation"
    T2 = "T2_rigid_wall"
    T3 = "T3_bone_milling"

    @classmethod
    def parse(cls, value: Union[str, "TaskId"]) -> "TaskId":
        if isinstance(value, cls):
            return value
        text = str(value).strip()
        for member in cls:
            if text in (member.value, member.name, member.name.lower()):
                return member
        raise PlantError(f"unknown task_id {value!r}")

    @property
    def short(self) -> str:
        return self.name


class PlantError(ValueError):
    """Invalid plant description."""


class SimulationError(RuntimeError):
    """Raised when integration produces a non-finite state."""

    def __init__(self, step: int, state):
        super().__init__(f"non-finite state at step {step}: {tuple(state)}")
        self.step = step


class StateVector(NamedTuple):
    position: float
    velocity: float
    deformation: float


def _positive(name: str, value: float) -> None:
    if not (value > 0 and math.isfinite(value)):
        raise PlantError(f"{name} must be strictly positive, got {value}")


def _noise_tuple(name: str, values) -> tuple:
    arr = tuple(float(v) for v in values)
    if len(arr) != 3 or any(not (v >= 0) for v in arr):
        raise PlantError(f"{name} must hold three non-negative SDs, got {values}")
    return arr


@dataclass(frozen=True, kw_only=True)
class PlantModel:
    """Common tool description shared by all task plants.

    Attributes
    ----------
    tool_mass : float
        Effective mass of tool plus hand, kg.
    tool_damping : float
        Viscous damping of the hand/device, N s/m.
    process_noise_sd : tuple of float
        Diffusion coefficients of the process noise per state component, in
        state units per sqrt(second). Velocity noise enters the momentum
        balance; position and deformation noise are added after the step.
    measurement_noise_sd : tuple of float
        Additive Gaussian observation noise per output component.
    """

    tool_mass: float = 0.1
    tool_damping: float = 1.0
    process_noise_sd: tuple = (0.0, 0.0, 0.0)
    measurement_noise_sd: tuple = (0.0, 0.0, 0.0)

    task_id = None

    def __post_init__(self):
        _positive("tool_mass", self.tool_mass)
        if not self.tool_damping >= 0:
            raise PlantError("tool_damping must be non-negative")
        object.__setattr__(self, "process_noise_sd",
                           _noise_tuple("process_noise_sd", self.process_noise_sd))
        object.__setattr__(self, "measurement_noise_sd",
                           _noise_tuple("measurement_noise_sd", self.measurement_noise_sd))

    def _free_flight(self, p, v, u, dt):
        """Momentum, effective denominator and contact-free predicted position."""
        mv = self.tool_mass * v + dt * u
        den = self.tool_mass + dt * self.tool_damping
        return mv, den, p + dt * mv / den

    def step(self, x, u: float, dt: float, dv: float = 0.0):
        """Advance one step; returns ``(p, v, deformation)``.

        ``dv`` is a velocity impulse (process noise already scaled by sqrt(dt)).
        """
        raise NotImplementedError

    def contact_force(self, x) -> float:
        """Reaction force on the tool at state ``x`` (negative pushes out)."""
        raise NotImplementedError

    def energy(self, x) -> float:
        """Total mechanical energy (kinetic plus stored elastic), joules."""
        return 0.5 * self.tool_mass * x[VEL] ** 2

    def static_force(self, position: float) -> float:
        """Magnitude of the quasi-static reaction at a held tool position."""
        raise NotImplementedError

    def rest_state(self) -> StateVector:
        return StateVector(0.0, 0.0, 0.0)

    def constrain(self, x):
        """Project a state estimate onto the admissible set of this plant."""
        return x

    def operating_state(self, force: float) -> StateVector:
        """Equilibrium under a constant command ``force``."""
        raise NotImplementedError(f"{type(self).__name__} has no static equilibrium")


@dataclass(frozen=True, kw_only=True)
class PalpationPlant(PlantModel):
    """Probe tip in series with a cubic-hardening Kelvin-Voigt tissue.

    The linear tissue stiffness follows the flat-punch indentation relation
    ``k1 = 2 a E / (1 - nu**2)`` for a rigid circular tip of radius ``a``; the
    cubic coefficient is ``k2 = k1 / hardening_length**2`` so the tangent
    stiffness doubles at ``delta = hardening_length / sqrt(3)``.
    """

    youngs_modulus: float = 5.0e3
    contact_radius: float = 2.0e-3
    poisson_ratio: float = 0.5
    hardening_length: float = 4.0e-3
    damping: float = 5.0
    contact_stiffness: float = 400.0

    task_id = TaskId.T1

    def __post_init__(self):
        super().__post_init__()
        for name in ("youngs_modulus", "contact_radius", "hardening_length",
                     "damping", "contact_stiffness"):
            _positive(name, getattr(self, name))
        if not 0.0 <= self.poisson_ratio < 1.0:
            raise PlantError("poisson_ratio must lie in [0, 1)")

    @property
    def k1(self) -> float:
        return 2.0 * self.contact_radius * self.youngs_modulus / (1.0 - self.poisson_ratio ** 2)

    @property
    def k2(self) -> float:
        return self.k1 / self.hardening_length ** 2

    def tissue_force(self, delta: float) -> float:
        """Elastic tissue reaction ``k1*delta + k2*delta**3``."""
        return self.k1 * delta + self.k2 * delta ** 3

    def step(self, x, u, dt, dv=0.0):
        p, v, d = x
        m = self.tool_mass
        mv, den, p_free = self._free_flight(p, v, u + m * dv / dt, dt)
        kc, k1, k2 = self.contact_stiffness, self.k1, self.k2
        a = dt * dt / den
        keff = kc / (1.0 + a * kc)
        beta = self.damping / dt
        # g(d') = beta (d' - d) + k1 d' + k2 d'^3 - keff (p_free - d')_+ is increasing
        lo = min(d, 0.0)
        hi = max(p_free, d, 0.0)
        y = min(max(d, lo), hi)
        for _ in range(60):
            gap = p_free - y
            g = beta * (y - d) + k1 * y + k2 * y ** 3
            dg = beta + k1 + 3.0 * k2 * y * y
            if gap > 0.0:
                g -= keff * gap
                dg += keff
            if g > 0.0:
                hi = y
            else:
                lo = y
            y_new = y - g / dg
            if not lo <= y_new <= hi:
                y_new = 0.5 * (lo + hi)
            if abs(y_new - y) <= 1e-15 * (abs(y) + 1e-12):
                y = y_new
                break
            y = y_new
        fc = keff * max(p_free - y, 0.0)
        v_new = (mv - dt * fc) / den
        return (p + dt * v_new, v_new, y)

    def contact_force(self, x):
        return -self.contact_stiffness * max(x[POS] - x[DEF], 0.0)

    def energy(self, x):
        p, v, d = x
        s = max(p - d, 0.0)
        return (0.5 * self.tool_mass * v * v + 0.5 * self.contact_stiffness * s * s
                + 0.5 * self.k1 * d * d + 0.25 * self.k2 * d ** 4)

    def equilibrium_deformation(self, position: float) -> float:
        """Tissue indentation balancing the tip spring at a held position."""
        if position <= 0.0:
            return 0.0
        kc, k1, k2 = self.contact_stiffness, self.k1, self.k2
        lo, hi = 0.0, position
        y = position * kc / (kc + k1)
        for _ in range(100):
            g = k1 * y + k2 * y ** 3 - kc * (position - y)
            if g > 0:
                hi = y
            else:
                lo = y
            y_new = y - g / (k1 + 3 * k2 * y * y + kc)
            if not lo <= y_new <= hi:
                y_new = 0.5 * (lo + hi)
            if abs(y_new - y) <= 1e-16 * max(abs(y), 1e-300):
                return y_new
            y = y_new
        return y

    def static_force(self, position):
        return self.tissue_force(self.equilibrium_deformation(position))

    def position_for_force(self, force: float) -> float:
        """Held tool position producing a quasi-static reaction ``force``."""
        if force <= 0.0:
            return 0.0
        lo, hi = 0.0, 1.0e-3
        while self.tissue_force(hi) < force:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.tissue_force(mid) < force:
                lo = mid
            else:
                hi = mid
        delta = 0.5 * (lo + hi)
        return delta + force / self.contact_stiffness

    def constrain(self, x):
        p, v, d = x
        return (p, v, max(d, 0.0))

    def operating_state(self, force):
        p = self.position_for_force(force)
        return StateVector(p, 0.0, self.equilibrium_deformation(p))


@dataclass(frozen=True, kw_only=True)
class RigidWallPlant(PlantModel):
    """Unilateral linear spring-damper wall."""

    wall_stiffness: float = 1.0e4
    damping: float = 15.0
    wall_position: float = 0.0

    task_id = TaskId.T2

    def __post_init__(self):
        super().__post_init__()
        _positive("wall_stiffness", self.wall_stiffness)
        _positive("damping", self.damping)

    def step(self, x, u, dt, dv=0.0):
        p, v, _ = x
        m = self.tool_mass
        mv, den, p_free = self._free_flight(p, v, u + m * dv / dt, dt)
        w = self.wall_position
        if p_free <= w:
            v_new = mv / den
            p_new = p_free
        else:
            k = self.wall_stiffness
            v_new = (mv - dt * k * (p - w)) / (den + dt * self.damping + dt * dt * k)
            p_new = p + dt * v_new
            if p_new <= w:
                p_new = w
                v_new = (w - p) / dt
        return (p_new, v_new, max(p_new - w, 0.0))

    def contact_force(self, x):
        pen = x[POS] - self.wall_position
        if pen <= 0.0:
            return 0.0
        return -(self.wall_stiffness * pen + self.damping * x[VEL])

    def energy(self, x):
        pen = max(x[POS] - self.wall_position, 0.0)
        return 0.5 * self.tool_mass * x[VEL] ** 2 + 0.5 * self.wall_stiffness * pen * pen

    def static_force(self, position):
        return self.wall_stiffness * max(position - self.wall_position, 0.0)

    def position_for_force(self, force: float) -> float:
        return self.wall_position + max(force, 0.0) / self.wall_stiffness

    def rest_state(self):
        return StateVector(self.wall_position, 0.0, 0.0)

    def operating_state(self, force):
        p = self.position_for_force(force)
        return StateVector(p, 0.0, p - self.wall_position)

    def constrain(self, x):
        p, v, _ = x
        return (p, v, max(p - self.wall_position, 0.0))


@dataclass(frozen=True, kw_only=True)
class MillingPlant(PlantModel):
    """Depth- and feed-rate-proportional milling resistance.

    The deformation state is the cut depth ``d`` below the bone surface
    (position 0). Advancing from ``p`` to ``p' > d`` removes ``p' - d`` of
    material and meets the resistance ``c * rho * d * (p' - d) / dt``.
    """

    bone_density: float = 1.8
    milling_coefficient: float = 4.0e4
    pilot_depth: float = 0.5e-3

    task_id = TaskId.T3

    def __post_init__(self):
        super().__post_init__()
        _positive("bone_density", self.bone_density)
        _positive("milling_coefficient", self.milling_coefficient)
        if not self.pilot_depth >= 0:
            raise PlantError("pilot_depth must be non-negative")

    def resistance_coefficient(self, depth: float) -> float:
        """Force per unit feed rate at cut depth ``depth``, N s/m."""
        return self.milling_coefficient * self.bone_density * max(depth, 0.0)

    def step(self, x, u, dt, dv=0.0):
        p, v, d = x
        m = self.tool_mass
        mv, den, p_free = self._free_flight(p, v, u + m * dv / dt, dt)
        if p_free <= d:
            return (p_free, mv / den, d)
        r = self.resistance_coefficient(d)
        v_new = (mv - r * (p - d)) / (den + r * dt)
        p_new = p + dt * v_new
        return (p_new, v_new, max(d, p_new))

    def contact_force(self, x):
        p, v, d = x
        if p < d or v <= 0.0:
            return 0.0
        return -self.resistance_coefficient(d) * v

    def static_force(self, position):
        return 0.0

    def rest_state(self):
        return StateVector(self.pilot_depth, 0.0, self.pilot_depth)

    def constrain(self, x):
        p, v, d = x
        return (p, v, max(d, p, 0.0))


@lru_cache(maxsize=64)
def _zoh(A: tuple, Bu: tuple, dt: float):
    n = len(Bu)
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = np.array(A)
    M[:n, n] = np.array(Bu)
    E = expm(M * dt)
    return E[:n, :n], E[:n, n]


@dataclass(frozen=True, kw_only=True)
class LinearPlant(PlantModel):
    """Linear time-invariant reference plant ``x' = A x + Bu u``.

    Stepped with the exact zero-order-hold discretization, so sampled data are
    exact flow samples at any step size. Used to exercise the exact regime of
    the lifted-model checks.
    """

    A: tuple = ((0.0, 1.0, 0.0), (-100.0, -2.0, 50.0), (0.0, 20.0, -40.0))
    Bu: tuple = (0.0, 10.0, 0.0)

    task_id = None

    def __post_init__(self):
        super().__post_init__()
        A = tuple(tuple(float(v) for v in row) for row in self.A)
        Bu = tuple(float(v) for v in self.Bu)
        if len(A) != 3 or any(len(r) != 3 for r in A) or len(Bu) != 3:
            raise PlantError("LinearPlant expects a 3x3 A and a 3-vector Bu")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Bu", Bu)

    def discrete(self, dt: float):
        """Exact discrete pair ``(Ad, Bd)`` for step ``dt``."""
        return _zoh(self.A, self.Bu, float(dt))

    def step(self, x, u, dt, dv=0.0):
        Ad, Bd = self.discrete(dt)
        xn = Ad @ np.asarray(x, dtype=float) + Bd * u
        xn[VEL] += dv
        return (float(xn[0]), float(xn[1]), float(xn[2]))

    def contact_force(self, x):
        return 0.0

    def static_force(self, position):
        return 0.0

    def operating_state(self, force):
        x = np.linalg.solve(np.array(self.A), -np.array(self.Bu) * force)
        return StateVector(*(float(v) for v in x))


_PLANTS = {TaskId.T1: PalpationPlant, TaskId.T2: RigidWallPlant, TaskId.T3: MillingPlant}


def make_task_model(task_id, params=None, **kwargs) -> PlantModel:
    """Build the ground-truth plant for a task.

    Parameters
    ----------
    task_id : TaskId or str
        ``T1_palpation``, ``T2_rigid_wall`` or ``T3_bone_milling`` (short names
        ``T1``..``T3`` accepted).
    params : mapping, optional
        Field overrides; merged with ``kwargs``.

    Notes
    -----
    Documented physical ranges: T1 modulus 5-50 kPa (grading range, other
    positive values accepted), T2 wall stiffness 1e3-1e5 N/m, T3 density
    roughly 1-2.5 g/cm^3.
    """
    task = TaskId.parse(task_id)
    merged = dict(params or {})
    merged.update(kwargs)
    cls = _PLANTS[task]
    names = {f.name for f in cls.__dataclass_fields__.values()}
    unknown = set(merged) - names
    if unknown:
        raise PlantError(f"unknown parameters for {task.value}: {sorted(unknown)}")
    return cls(**merged)


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled simulation record.

    ``inputs[k]`` is the command held over ``[t_k, t_k + dt)``; ``forces[k]`` is
    the plant reaction at ``states[k]``.
    """

    timestamps: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    forces: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.timestamps)
        if not (len(self.states) == len(self.inputs) == len(self.outputs) == n):
            raise ValueError("trajectory arrays must have equal lengths")
        if n > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")

    @property
    def dt(self) -> float:
        return float(self.timestamps[1] - self.timestamps[0])

    def __len__(self):
        return len(self.timestamps)


InputPolicy = Union[float, Sequence[float], np.ndarray, Callable[[float, np.ndarray], float]]


def simulate_trajectory(plant: PlantModel, input_policy: InputPolicy, duration: float,
                        dt: float, seed, x0=None, substeps: int = 1) -> Trajectory:
    """Integrate a plant under a command policy with seeded noise.

    Parameters
    ----------
    plant : PlantModel
    input_policy : float, array_like or callable
        Constant command, a per-sample sequence, or ``policy(t, y) -> u``
        evaluated on the noisy output at each sample instant.
    duration, dt : float
        Record length and sample period, seconds. ``round(duration/dt) + 1``
        samples are produced.
    seed : int
        Seed of the private PCG64 stream.
    x0 : sequence, optional
        Initial state; defaults to ``plant.rest_state()``.
    substeps : int
        Internal steps per sample (the command is held constant); used to build
        fine-step reference solutions.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not duration >= dt * (1 - 1e-12):
        raise ValueError("duration must be at least dt")
    n = int(round(duration / dt)) + 1
    h = dt / substeps
    rng = np.random.default_rng(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF))
    proc = rng.standard_normal((n - 1, substeps, 3))
    meas = rng.standard_normal((n, 3))
    sd_w = np.asarray(plant.process_noise_sd) * math.sqrt(h)
    sd_v = np.asarray(plant.measurement_noise_sd)
    meas = meas * sd_v
    has_pos_noise = sd_w[POS] > 0 or sd_w[DEF] > 0

    if callable(input_policy):
        policy = input_policy
        seq = None
    else:
        arr = np.asarray(input_policy, dtype=float)
        if arr.ndim == 0:
            seq = np.full(n, float(arr))
        else:
            seq = arr.reshape(-1)
            if len(seq) < n:
                raise ValueError(f"input sequence has {len(seq)} entries, need {n}")
        policy = None

    x = tuple(float(c) for c in (plant.rest_state() if x0 is None else x0))
    states = np.empty((n, 3))
    outputs = np.empty((n, 3))
    inputs = np.empty(n)
    forces = np.empty(n)
    times = np.arange(n) * dt
    for k in range(n):
        states[k] = x
        y = states[k] + meas[k]
        outputs[k] = y
        forces[k] = plant.contact_force(x)
        u = float(policy(times[k], y)) if policy is not None else float(seq[k])
        inputs[k] = u
        if k == n - 1:
            break
        for j in range(substeps):
            w = proc[k, j] * sd_w
            x = plant.step(x, u, h, float(w[VEL]))
            if has_pos_noise:
                x = plant.constrain((x[POS] + w[POS], x[VEL], x[DEF] + w[DEF]))
        if not (math.isfinite(x[0]) and math.isfinite(x[1]) and math.isfinite(x[2])):
            raise SimulationError(k + 1, x)
    return Trajectory(times, states, inputs, outputs, forces)


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Export as CSV: t, x_*, v_* (measurement noise), u_0, y_*; 9 significant digits."""
    noise = traj.outputs - traj.states
    header = (["t"] + [f"x_{s}" for s in STATE_NAMES] + [f"v_{s}" for s in STATE_NAMES]
              + ["u_0"] + [f"y_{s}" for s in STATE_NAMES])
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(len(traj)):
            row = [traj.timestamps[k], *traj.states[k], *noise[k], traj.inputs[k], *traj.outputs[k]]
            w.writerow([f"{v:.9g}" for v in row])


def read_trajectory_csv(path) -> Trajectory:
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    return Trajectory(data[:, 0], data[:, 1:4], data[:, 7], data[:, 8:11])
