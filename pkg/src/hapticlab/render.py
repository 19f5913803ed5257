"""Per-tick haptic force pipeline.

Stage order within a tick: raw spring-damper force, lifted-model residual
correction (optionally evaluated at a model-predicted future state to offset
the downstream lag), iterative convergence step, first-order low-pass filter,
optional shaping hook, Pade-approximated transport delay.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np


class RenderError(ValueError):
    """Invalid render configuration or dimension mismatch."""


def _as_matrix(value, n: int = None) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1) if n is None else arr * np.eye(n)
    return np.atleast_2d(arr)


def _is_psd(M: np.ndarray) -> bool:
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        return False
    return bool(np.linalg.eigvalsh(0.5 * (M + M.T)).min() >= -1e-12 * max(1.0, np.abs(M).max()))


@dataclass(frozen=True)
class RenderConfig:
    """Gains and time constants of the force pipeline.

    Attributes
    ----------
    K_f, B_f : array_like
        Rendering stiffness (N/m) and damping (N s/m); scalars for one DOF.
    C : array_like
        Correction gain mapping the lifted residual rate to newtons, shape
        ``(n_dof, N)``; zero disables the correction.
    filter_time_constant : float
        Low-pass time constant ``tc`` of ``1/(1 + tc s)``, seconds; zero
        disables the filter.
    latency_tau : float
        Transport delay modelled by the first-order Pade all-pass, seconds.
    dt : float
        Tick period, seconds.
    convergence_gain : float
        Step size of the per-tick iterative adjustment toward the corrected
        force (1 applies the correction immediately).
    rest_position : array_like
        Spring rest position ``x0``.
    tool_mass, tool_damping : float
        Mass (kg) and hand damping (N s/m) of the nominal one-step model
        behind the residual.
    prediction_steps : int
        Ticks of held-input lifted prediction applied before the correction.
    """

    K_f: np.ndarray = 0.0
    B_f: np.ndarray = 0.0
    C: np.ndarray = 0.0
    filter_time_constant: float = 5e-3
    latency_tau: float = 4.3e-3
    dt: float = 1e-3
    convergence_gain: float = 1.0
    rest_position: np.ndarray = 0.0
    tool_mass: float = 0.1
    tool_damping: float = 0.0
    prediction_steps: int = 0

    def __post_init__(self):
        Kf = _as_matrix(self.K_f)
        Bf = _as_matrix(self.B_f, Kf.shape[0])
        if Kf.shape != Bf.shape:
            raise RenderError("K_f and B_f must have the same shape")
        if not (_is_psd(Kf) and _is_psd(Bf)):
            raise RenderError("K_f and B_f must be symmetric positive semidefinite")
        if not self.filter_time_constant >= 0:
            raise RenderError("filter_time_constant must be non-negative")
        if not 0.0 < self.convergence_gain <= 1.0:
            raise RenderError("convergence_gain must lie in (0, 1]")
        if not self.latency_tau >= 0:
            raise RenderError("latency_tau must be non-negative")
        if not self.dt > 0:
            raise RenderError("dt must be positive")
        if not (self.tool_mass > 0 and self.tool_damping >= 0):
            raise RenderError("tool_mass must be positive and tool_damping non-negative")
        if self.prediction_steps < 0:
            raise RenderError("prediction_steps must be non-negative")
        x0 = np.broadcast_to(np.asarray(self.rest_position, dtype=float), (Kf.shape[0],)).copy()
        object.__setattr__(self, "K_f", Kf)
        object.__setattr__(self, "B_f", Bf)
        object.__setattr__(self, "C", np.atleast_2d(np.asarray(self.C, dtype=float)))
        object.__setattr__(self, "rest_position", x0)
        object.__setattr__(self, "prediction_steps", int(self.prediction_steps))

    @property
    def n_dof(self) -> int:
        return self.K_f.shape[0]

    @property
    def correction_enabled(self) -> bool:
        return bool(np.any(self.C != 0.0))


class ForceSample(NamedTuple):
    F_raw: float
    F_adj: float
    F_filt: float
    F_delayed: float
    tick_index: int
    compute_time: float
    F_shaped: float = None


@dataclass(frozen=True)
class FilterState:
    y: float = 0.0


@dataclass(frozen=True)
class DelayState:
    x_prev: float = 0.0
    y_prev: float = 0.0


def raw_force(x, x0, xdot, K_f, B_f):
    """Spring-damper force ``-K_f (x - x0) - B_f xdot``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return -float(np.asarray(K_f).reshape(())) * (float(x) - float(np.asarray(x0).reshape(()))) \
            - float(np.asarray(B_f).reshape(())) * float(xdot)
    K_f, B_f = np.atleast_2d(K_f), np.atleast_2d(B_f)
    return -(K_f @ (x - np.asarray(x0, dtype=float))) - B_f @ np.asarray(xdot, dtype=float)


def residual_rate(model, phi, phi_next, u=None) -> np.ndarray:
    """``(K phi + B u - phi_next) / dt`` in the model's discrete convention."""
    phi = np.asarray(phi, dtype=float)
    phi_next = np.asarray(phi_next, dtype=float)
    N = model.K.shape[0]
    if phi.shape != (N,) or phi_next.shape != (N,):
        raise RenderError(f"lifted vectors must have length {N}")
    pred = model.K @ phi
    if u is not None:
        pred = pred + model.B @ np.atleast_1d(np.asarray(u, dtype=float))
    return (pred - phi_next) / model.dt


def corrected_force(F_raw, model, phi, phi_next, C, u=None):
    """Koopman-corrected force ``F_raw + C @ residual_rate``."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    r = residual_rate(model, phi, phi_next, u)
    if C.shape[1] != r.shape[0]:
        raise RenderError(f"C has {C.shape[1]} columns, residual has {r.shape[0]} entries")
    out = np.asarray(F_raw, dtype=float) + C @ r
    return float(out[0]) if out.size == 1 and np.ndim(F_raw) == 0 else out


def lowpass_coefficient(dt: float, time_constant: float) -> float:
    """ZOH gain ``1 - exp(-dt/tc)``; a zero time constant passes through."""
    if time_constant <= 0.0:
        return 1.0
    return -math.expm1(-dt / time_constant)


def lowpass_step(state: FilterState, value: float, dt: float, time_constant: float):
    """Exact zero-order-hold step of ``1/(1 + tc s)``; returns ``(state, output)``."""
    if time_constant <= 0.0:
        return FilterState(value), value
    a = lowpass_coefficient(dt, time_constant)
    y = state.y + a * (value - state.y)
    return FilterState(y), y


def pade_coefficient(dt: float, tau: float) -> float:
    """Bilinear-transform coefficient ``c = (1 - a)/(1 + a)``, ``a = tau/dt``."""
    a = tau / dt
    return (1.0 - a) / (1.0 + a)


def pade_delay_step(state: DelayState, value: float, dt: float, tau: float):
    """One step of the Tustin-discretized ``(1 - tau s/2)/(1 + tau s/2)``.

    Realized as ``y_k = c x_k + x_{k-1} - c y_{k-1}``, an exact all-pass with
    unit DC gain. ``tau = 0`` passes the input through.
    """
    if tau == 0.0:
        return DelayState(value, value), value
    c = pade_coefficient(dt, tau)
    y = c * value + state.x_prev - c * state.y_prev
    return DelayState(value, y), y


def _two_sum(a, b):
    s = a + b
    bp = s - a
    return s, (a - (s - bp)) + (b - bp)


def convergence_trace(F0, F_desired, gain: float, tol: float, max_iter: int = 100000):
    """Iterate ``F <- F + gain (F_desired - F)`` and record the error norms.

    The force is held as an unevaluated hi+lo pair (compensated summation) so
    the recorded error ``||F_desired - F||`` is not swamped by cancellation
    once ``F`` is close to ``F_desired``.

    Returns
    -------
    F_final : ndarray or float
    errors : ndarray
        ``errors[t]`` is the error after ``t`` iterations (``errors[0] = ||e0||``).
    """
    if not 0.0 < gain <= 1.0:
        raise RenderError("gain must lie in (0, 1]")
    if not tol > 0:
        raise RenderError("tol must be positive")
    scalar = np.ndim(F0) == 0 and np.ndim(F_desired) == 0
    hi = np.atleast_1d(np.asarray(F0, dtype=float)).copy()
    lo = np.zeros_like(hi)
    Fd = np.broadcast_to(np.atleast_1d(np.asarray(F_desired, dtype=float)), hi.shape)
    errors = []
    for _ in range(max_iter + 1):
        e = (Fd - hi) - lo
        err = float(np.linalg.norm(e))
        errors.append(err)
        if err <= tol:
            break
        hi, carry = _two_sum(hi, gain * e)
        lo = lo + carry
        hi, lo = _two_sum(hi, lo)
    F = hi + lo
    return (float(F[0]) if scalar else F), np.asarray(errors)


def converge_force(F0, F_desired, gain: float, tol: float, max_iter: int = 100000):
    """Geometric force convergence; returns ``(F_final, iterations)``."""
    F, errors = convergence_trace(F0, F_desired, gain, tol, max_iter)
    return F, len(errors) - 1


class RenderSession:
    """Single-owner per-tick pipeline state for a one-DOF tool axis.

    Parameters
    ----------
    config : RenderConfig
    model : KoopmanModel, optional
        Required when ``config.C`` is non-zero.
    contact : callable, optional
        ``contact(state) -> bool`` gating the whole force; out of contact the
        output target is zero and the lifted correction is skipped (unless
        ``anticipate`` is set). A predicted state out of contact yields a zero
        target (anticipated release). Defaults to always in contact.
    constrain : callable, optional
        Projection applied to predicted states (e.g. non-negative indentation).
    shaper : callable, optional
        ``shaper(F_filt) -> F`` applied between the filter and the delay.
    force_law : callable, optional
        ``force_law(state) -> F`` replacing the spring-damper as the base force.
    anticipate : bool
        From a free-space state, coast the nominal tool model (mass, hand
        damping, held command) over the look-ahead window; if it enters contact
        the lifted model takes over for the remaining steps, so contact onset
        is rendered ahead of time.
    """

    def __init__(self, config: RenderConfig, model=None, contact: Callable = None,
                 constrain: Callable = None, shaper: Callable = None,
                 force_law: Callable = None, anticipate: bool = False):
        if config.n_dof != 1:
            raise RenderError("RenderSession renders a single tool axis")
        if config.correction_enabled and model is None:
            raise RenderError("a fitted lifted model is required when C is non-zero")
        self.config = config
        self.model = model
        self.contact = contact
        self.constrain = constrain
        self.shaper = shaper
        self.force_law = force_law
        self.anticipate = bool(anticipate) and contact is not None
        self._kf = float(config.K_f[0, 0])
        self._bf = float(config.B_f[0, 0])
        self._x0 = float(config.rest_position[0])
        self._lp = lowpass_coefficient(config.dt, config.filter_time_constant)
        self._tau = config.latency_tau
        self._correct = config.correction_enabled
        self._pc = pade_coefficient(config.dt, config.latency_tau) if config.latency_tau > 0 else 1.0
        if config.correction_enabled:
            D = model.dictionary
            if config.C.shape != (1, D.dimension):
                raise RenderError(f"C must have shape (1, {D.dimension})")
            if abs(model.dt - config.dt) > 1e-12 * config.dt:
                raise RenderError("model and render dt differ")
            self._K = np.asarray(model.K)
            self._B = np.asarray(model.B)[:, 0]
            self._J = [int(j) for j in np.flatnonzero(config.C[0])]
            self._CJ = [float(c) for c in config.C[0, self._J]]
            # operators act on the augmented vector [phi; u]
            KB = np.hstack([np.asarray(model.K), np.asarray(model.B)[:, :1]])
            self._KBJ = KB[self._J]
            rows = list(D.identity_index)
            # only the identity rows are needed to read off predicted states
            self._horizons = [np.hstack([Kr, Gr[:, :1]])[rows] for Kr, Gr in
                              (model.horizon_operators(r) for r in range(config.prediction_steps + 1))]
            self._lift = D.lift_fast
            self._idx = D.identity_index
            self._sc = D.scales
        self.reset()

    def reset(self):
        self._y = 0.0
        self._x_prev = 0.0
        self._y_prev = 0.0
        self.tick_index = -1
        self._adj = 0.0
        if self.shaper is not None and hasattr(self.shaper, "reset"):
            self.shaper.reset()

    @property
    def filter_state(self) -> FilterState:
        return FilterState(self._y)

    @property
    def delay_state(self) -> DelayState:
        return DelayState(self._x_prev, self._y_prev)

    def _base(self, state):
        if self.force_law is not None:
            return self.force_law(state)
        return -self._kf * (state[0] - self._x0) - self._bf * state[1]

    def _target(self, state, u):
        contact = self.contact
        if not self._correct:
            if contact is not None and not contact(state):
                return 0.0, 0.0
            f = self._base(state)
            return f, f
        h = self.config.prediction_steps
        if contact is not None and not contact(state):
            # the lifted model describes the contact mode only
            if not (self.anticipate and h):
                return 0.0, 0.0
            cfg = self.config
            m, b, dt = cfg.tool_mass, cfg.tool_damping, cfg.dt
            p, v = state[0], state[1]
            for j in range(h):
                v = (m * v + dt * u) / (m + dt * b)
                p += dt * v
                entry = (p, v) + tuple(state[2:])
                if contact(entry):
                    break
            else:
                return 0.0, 0.0
            pred = self._predict(entry, u, h - j - 1)
            if not contact(pred):
                return 0.0, 0.0
            return 0.0, self._implied_force(pred, u)
        f_raw = self._base(state)
        pred = self._predict(state, u, h) if h else state
        if contact is not None and not contact(pred):
            return f_raw, 0.0
        return f_raw, self._implied_force(pred, u)

    def _predict(self, state, u, steps):
        """State ``steps`` ticks ahead under the held command ``u``."""
        phi = self._lift(state)
        phi.append(u)
        z = (self._horizons[steps] @ phi).tolist()
        pred = tuple(zi * si for zi, si in zip(z, self._sc))
        return self.constrain(pred) if self.constrain is not None else pred

    def _implied_force(self, pred, u):
        """Base force at ``pred`` plus the correction from the lifted residual."""
        p, v = pred[0], pred[1]
        f_pred = self._base(pred)
        cfg = self.config
        dt = cfg.dt
        v_nom = (cfg.tool_mass * v + dt * (u + f_pred)) / (cfg.tool_mass + dt * cfg.tool_damping)
        lifted_next = self._lift((p + dt * v_nom, v_nom) + tuple(pred[2:]))
        phi = self._lift(pred)
        phi.append(u)
        # only the residual rows weighted by C are needed
        r = (self._KBJ @ phi).tolist()
        corr = 0.0
        for c, ri, j in zip(self._CJ, r, self._J):
            corr += c * (ri - lifted_next[j])
        return f_pred + corr / dt

    def tick(self, state, u: float = 0.0) -> ForceSample:
        """Render one tick from the measured state ``(position, velocity, ...)``."""
        t0 = time.perf_counter()
        self.tick_index += 1
        f_raw, target = self._target(state, u)
        g = self.config.convergence_gain
        self._adj = target if g == 1.0 else self._adj + g * (target - self._adj)
        y = self._adj if self._lp == 1.0 else self._y + self._lp * (self._adj - self._y)
        self._y = y
        shaped = self.shaper(y) if self.shaper is not None else y
        if self._tau == 0.0:
            out = shaped
        else:
            out = self._pc * shaped + self._x_prev - self._pc * self._y_prev
        self._x_prev, self._y_prev = shaped, out
        return ForceSample(f_raw, self._adj, y, out, self.tick_index,
                           time.perf_counter() - t0, shaped)


def render_tick(session: RenderSession, x: float, xdot: float, u: float = 0.0,
                deformation: float = 0.0) -> ForceSample:
    """Functional entry point: one pipeline tick for position ``x``, velocity ``xdot``."""
    return session.tick((float(x), float(xdot), float(deformation)), u)


def write_tick_log(samples, path) -> None:
    """Per-tick CSV: tick, F_raw, F_adj, F_filt, F_delayed, compute_time."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tick", "F_raw", "F_adj", "F_filt", "F_delayed", "compute_time"])
        for s in samples:
            w.writerow([s.tick_index, f"{s.F_raw:.9g}", f"{s.F_adj:.9g}", f"{s.F_filt:.9g}",
                        f"{s.F_delayed:.9g}", f"{s.compute_time:.6g}"])


@dataclass(frozen=True)
class StabilityReport:
    stable: bool
    growth: float
    peak: float


def stability_probe(config: RenderConfig, mass: float, duration: float = 2.0,
                    initial_velocity: float = 0.05, user_damping: float = 0.0) -> StabilityReport:
    """Numerical boundedness test of a mass coupled to the rendered spring-damper.

    A free mass starts at the rest position moving into the rendered spring;
    its only force is the pipeline output (filter and delay included, no
    correction). The loop is declared stable when the late-window envelope of
    the position does not exceed the early-window envelope.
    """
    session = RenderSession(RenderConfig(K_f=config.K_f, B_f=config.B_f, C=0.0,
                                         filter_time_constant=config.filter_time_constant,
                                         latency_tau=config.latency_tau, dt=config.dt,
                                         rest_position=config.rest_position))
    dt = config.dt
    n = int(round(duration / dt))
    x0 = float(config.rest_position[0])
    p, v = x0, initial_velocity
    trace = np.empty(n)
    for k in range(n):
        f = session.tick((p, v)).F_delayed
        v = (mass * v + dt * f) / (mass + dt * user_damping)
        p += dt * v
        trace[k] = p - x0
        if not math.isfinite(p) or abs(p) > 1e6:
            return StabilityReport(False, float("inf"), float("inf"))
    q = max(n // 4, 1)
    early = float(np.abs(trace[:q]).max())
    late = float(np.abs(trace[-q:]).max())
    growth = late / early if early > 0 else 0.0
    return StabilityReport(growth <= 1.0, growth, float(np.abs(trace).max()))
