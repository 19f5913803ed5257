"""Closed-loop trials: simulated user, ground-truth plant and a rendering pipeline.

A trial couples three pieces. The plant advances under the user's command
and supplies the reference force ``F_ideal`` (its own reaction, noise-free and
undelayed). The renderer sees the measured state and produces the felt force.
The simulated user closes the loop on the felt force only, so rendering errors
propagate into the task outcome.

Conditions
----------
``raw``
    Spring-damper tuned to the task's nominal grade (a generic tissue model).
``adjusted``
    Lifted-model correction with look-ahead covering the filter and delay lag.
``perceptual``
    ``adjusted`` followed by the perceptual shaper. The look-ahead may be
    extended to cover the shaper lag (``shaper_extra_steps``); it is not by
    default because prediction amplifies the position-differenced velocity
    noise.
``oracle``
    The plant's own force law with no filter, delay or correction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from ..dynamics import TaskId, Trajectory, make_task_model
from ..koopman import Dictionary, KoopmanModel, fit_edmd
from ..percept import Hyperpriors, PerceptualShaper, TissuePrior, sample_observer
from ..render import RenderConfig, RenderSession
from .metrics import compute_fidelity_metrics, effective_delay

CONDITIONS = ("raw", "adjusted", "perceptual")
GROUPS = ("novice", "intermediate", "expert")
TASKS = (TaskId.T1, TaskId.T2, TaskId.T3)

# grade parameter and values per task; the middle entry is the nominal grade
GRADES = {
    TaskId.T1: ("youngs_modulus", (5.0e3, 10.0e3, 20.0e3, 35.0e3, 50.0e3)),
    TaskId.T2: ("wall_stiffness", (2.5e3, 5.0e3, 1.0e4, 1.5e4, 2.0e4)),
    TaskId.T3: ("bone_density", (1.4, 1.6, 1.8, 2.0, 2.2)),
}
NOMINAL_GRADE = 2


@dataclass(frozen=True)
class TrialSettings:
    """Every tunable of a trial; defaults are the campaign defaults."""

    dt: float = 1e-3
    duration: float = 1.2
    ramp_time: float = 0.4
    hold_start: float = 0.6
    # targets
    palpation_force: float = 0.5
    wall_force: float = 1.0
    wall_start: float = -2.0e-4
    feed_rate: float = 5.0e-3
    feed_start: float = 0.1
    # user model
    force_gain: float = 1.0
    integral_gain: float = 5.0
    track_kp: float = 200.0
    track_kd: float = 5.0
    motor_noise_sd: float = 0.04
    motor_noise_tc: float = 0.05
    group_noise: tuple = (("novice", 1.5), ("intermediate", 1.0), ("expert", 0.6))
    # sensing
    position_noise_sd: float = 2.0e-6
    velocity_noise_sd: float = 1.0e-3  # used only when velocity is not differenced
    velocity_from_position: bool = True
    # render
    filter_time_constant: float = 5.0e-3
    latency_tau: float = 4.3e-3
    convergence_gain: float = 1.0
    prediction_steps: int = -1  # -1: cover filter plus delay lag
    anticipate_contact: bool = True
    # lifted model
    dictionary_degree: int = 2
    training_runs: int = 8
    training_seed: int = 7
    # perceptual shaper
    shaper_sigma_f: float = 1.0
    shaper_sigma_y: float = 1.0
    prior_tau: float = 1.0
    prior_sigma: float = 0.02
    deadband_fraction: float = 0.0
    shaper_extra_steps: int = 0  # -1: extend the look-ahead by the shaper lag
    # percept classification
    presentations: int = 20
    hyperpriors: Hyperpriors = field(default_factory=Hyperpriors)

    def group_multiplier(self, group: str) -> float:
        table = dict(self.group_noise)
        if group not in table:
            raise ValueError(f"unknown group {group!r}; expected one of {tuple(table)}")
        return table[group]

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.dt)) + 1

    def lookahead(self, condition: str) -> int:
        if condition in ("raw", "oracle"):
            return 0
        h = self.prediction_steps
        if h < 0:
            h = int(round((self.filter_time_constant + self.latency_tau) / self.dt))
        if condition == "perceptual":
            extra = self.shaper_extra_steps
            h += int(round(self.shaper_lag)) if extra < 0 else extra
        return h

    @property
    def shaper_lag(self) -> float:
        return self.shaper_sigma_y ** 2 / self.shaper_sigma_f ** 2


@dataclass(frozen=True)
class TrialRecord:
    task: str
    group: str
    trial_index: int
    seed: int
    eps_F: float
    latency: float
    percept_accuracy: float
    task_error: float
    smoothness_raw: float
    smoothness_norm: float
    user: int = 0
    grade: int = 0
    condition: str = ""
    compute_time: float = 0.0

    def __post_init__(self):
        if not self.eps_F >= 0:
            raise ValueError("eps_F must be non-negative")
        if not 0.0 <= self.percept_accuracy <= 1.0:
            raise ValueError("percept_accuracy must lie in [0, 1]")
        if not self.task_error >= 0:
            raise ValueError("task_error must be non-negative")


RECORD_COLUMNS = ("task", "group", "trial_index", "seed", "eps_F", "latency",
                  "percept_accuracy", "task_error", "smoothness_raw", "smoothness_norm",
                  "user", "grade", "condition")


def task_plant(task, grade: int, settings: TrialSettings):
    task = TaskId.parse(task)
    name, values = GRADES[task]
    return make_task_model(task, {name: values[grade]})


class _Protocol:
    """Reference signal, user command law and task-error definition of one task."""

    def __init__(self, task: TaskId, plant, settings: TrialSettings):
        self.task = task
        self.plant = plant
        self.s = settings

    def start_state(self):
        if self.task is TaskId.T2:
            return (self.s.wall_start, 0.0, 0.0)
        return tuple(self.plant.rest_state())

    def target(self, t: float) -> float:
        s = self.s
        if self.task is TaskId.T3:
            return self.plant.pilot_depth + s.feed_rate * max(t - s.feed_start, 0.0)
        level = s.palpation_force if self.task is TaskId.T1 else s.wall_force
        return level * min(t / s.ramp_time, 1.0)

    def target_position(self, t: float) -> float:
        if self.task is TaskId.T3:
            return self.target(t)
        return self.plant.operating_state(self.target(t)).position


def _nominal_scales(task: TaskId, settings: TrialSettings):
    nominal = task_plant(task, NOMINAL_GRADE, settings)
    if task is TaskId.T1:
        op = nominal.operating_state(settings.palpation_force)
        return (op.position, op.position / settings.ramp_time, op.deformation), nominal
    if task is TaskId.T2:
        op = nominal.operating_state(settings.wall_force)
        return (op.position, 0.1, op.deformation), nominal
    depth = nominal.pilot_depth + settings.feed_rate * settings.duration
    return (depth, settings.feed_rate, depth), nominal


def baseline_config(task, settings: TrialSettings, **overrides) -> RenderConfig:
    """Spring-damper baseline tuned to the nominal grade of ``task``."""
    task = TaskId.parse(task)
    _, nominal = _nominal_scales(task, settings)
    if task is TaskId.T1:
        op = nominal.operating_state(settings.palpation_force)
        K_f, B_f = settings.palpation_force / op.position, 0.0
    elif task is TaskId.T2:
        K_f, B_f = nominal.wall_stiffness, nominal.damping
    else:
        mid = nominal.pilot_depth + 0.5 * settings.feed_rate * (settings.duration - settings.feed_start)
        K_f, B_f = 0.0, nominal.resistance_coefficient(mid)
    kw = dict(K_f=K_f, B_f=B_f, C=0.0, filter_time_constant=settings.filter_time_constant,
              latency_tau=settings.latency_tau, dt=settings.dt,
              convergence_gain=settings.convergence_gain, rest_position=0.0,
              tool_mass=nominal.tool_mass, tool_damping=nominal.tool_damping)
    kw.update(overrides)
    return RenderConfig(**kw)


def contact_gate(task, settings: TrialSettings = None):
    """Renderer-side contact test on a (measured or predicted) state.

    The tool position is a sensor reading while the tissue state (indentation,
    cut depth) belongs to the simulation and is exact; the milling gate
    therefore accepts tool readings within three position-noise SDs behind the
    cut front. The feed direction is not part of the gate: differenced
    velocity readings are too noisy for a sign test.
    """
    task = TaskId.parse(task)
    if task is TaskId.T3:
        tol = 3.0 * (settings.position_noise_sd if settings is not None else 0.0)
        return lambda x: x[0] >= x[2] - tol
    return lambda x: x[0] > 0.0


class _Ou:
    """Exact discretization of an Ornstein-Uhlenbeck process."""

    def __init__(self, sd: float, tc: float, dt: float, z: np.ndarray):
        self.a = math.exp(-dt / tc)
        self.b = sd * math.sqrt(1.0 - self.a * self.a)
        self.z = z
        self.value = sd * float(z[0])

    def step(self, k: int) -> float:
        self.value = self.a * self.value + self.b * float(self.z[k])
        return self.value


def _user_command(task: TaskId, s: TrialSettings, t: float, ref: float, ref_next: float,
                  felt: float, y, integ: float):
    """User force from the felt force; returns ``(u, integral_state)``."""
    if task is TaskId.T3:
        rate = (ref_next - ref) / s.dt
        u = felt + s.track_kp * (ref - y[0]) + s.track_kd * (rate - y[1])
        return u, integ
    err = ref - felt
    integ = integ + s.dt * err
    # pressing tasks: the voluntary command only pushes
    return max(s.force_gain * ref + s.integral_gain * integ, 0.0), integ


def _closed_loop(task: TaskId, plant, session, s: TrialSettings, rng_streams, noise_scale: float,
                 ideal_feedback: bool = False):
    """Run one closed loop; returns per-tick arrays."""
    proto = _Protocol(task, plant, s)
    n = s.n_ticks
    dt = s.dt
    meas = rng_streams["meas"]
    ou = _Ou(s.motor_noise_sd * noise_scale, s.motor_noise_tc, dt, rng_streams["motor"])
    x = proto.start_state()
    states = np.empty((n, 3))
    inputs = np.empty(n)
    rendered = np.empty(n)
    ideal = np.empty(n)
    refs = np.empty(n)
    compute = np.empty(n)
    integ = 0.0
    u = 0.0
    sp, sv = s.position_noise_sd, s.velocity_noise_sd
    diff_v = s.velocity_from_position
    p_prev = None
    ref_next = proto.target(0.0)
    for k in range(n):
        t = k * dt
        ref, ref_next = ref_next, proto.target(t + dt)
        states[k] = x
        f_true = plant.contact_force(x)
        ideal[k] = f_true
        if ideal_feedback:
            y = x
            f_out = f_true
            compute[k] = 0.0
        else:
            p_meas = x[0] + sp * meas[k, 0]
            if diff_v:
                # encoder-style velocity: backward difference of the position readings
                v_meas = x[1] if p_prev is None else (p_meas - p_prev) / dt
                p_prev = p_meas
            else:
                v_meas = x[1] + sv * meas[k, 1]
            y = (p_meas, v_meas, x[2])
            sample = session.tick(y, u)
            f_out = sample.F_delayed
            compute[k] = sample.compute_time
        rendered[k] = f_out
        refs[k] = ref
        u, integ = _user_command(task, s, t, ref, ref_next, -f_out, y, integ)
        u += ou.step(k)
        inputs[k] = u
        if k < n - 1:
            x = plant.step(x, u, dt)
            if not (math.isfinite(x[0]) and math.isfinite(x[1])):
                raise FloatingPointError(f"trial diverged at tick {k + 1}")
    return dict(states=states, inputs=inputs, rendered=rendered, ideal=ideal,
                refs=refs, compute=compute)


def _streams(seed, n: int):
    rng = np.random.default_rng(seed)
    return {"meas": rng.standard_normal((n, 3)), "motor": rng.standard_normal(n)}


def _contact_segments(task: TaskId, states, inputs, dt):
    gate = contact_gate(task)
    inside = np.array([gate(x) for x in states])
    if task is TaskId.T1:
        inside = states[:, 0] > states[:, 2]
    segs, start = [], None
    for k, flag in enumerate(np.r_[inside, False]):
        if flag and start is None:
            start = k
        elif not flag and start is not None:
            if k - start >= 3:
                sl = slice(start, k)
                m = k - start
                segs.append(Trajectory(np.arange(m) * dt, states[sl], inputs[sl], states[sl]))
            start = None
    return segs


@lru_cache(maxsize=64)
def fit_task_model(task, grade: int, settings: TrialSettings) -> KoopmanModel:
    """Lifted model of one (task, grade) fitted from ideal-feedback closed-loop runs.

    Training runs use varied target levels and motor noise but no measurement
    noise; only in-contact samples enter the regression.
    """
    task = TaskId.parse(task)
    plant = task_plant(task, grade, settings)
    scales, _ = _nominal_scales(task, settings)
    dictionary = Dictionary.polynomial(3, settings.dictionary_degree, scales=scales)
    levels = np.linspace(0.6, 1.4, settings.training_runs)
    segs = []
    for i, lv in enumerate(levels):
        if task is TaskId.T1:
            s = replace(settings, palpation_force=settings.palpation_force * lv)
        elif task is TaskId.T2:
            s = replace(settings, wall_force=settings.wall_force * lv)
        else:
            s = replace(settings, feed_rate=settings.feed_rate * lv)
        seq = np.random.SeedSequence(settings.training_seed, spawn_key=(TASKS.index(task), grade, i))
        run = _closed_loop(task, plant, None, s, _streams(seq, s.n_ticks), 1.5, ideal_feedback=True)
        segs += _contact_segments(task, run["states"], run["inputs"], s.dt)
    return fit_edmd(segs, dictionary)


def build_session(task, grade: int, condition: str, settings: TrialSettings) -> RenderSession:
    task = TaskId.parse(task)
    plant = task_plant(task, grade, settings)
    gate = contact_gate(task, settings)
    if condition == "oracle":
        cfg = baseline_config(task, settings, filter_time_constant=0.0, latency_tau=0.0)
        return RenderSession(cfg, contact=None, force_law=plant.contact_force)
    if condition == "raw":
        return RenderSession(baseline_config(task, settings), contact=gate)
    if condition not in ("adjusted", "perceptual"):
        raise ValueError(f"unknown condition {condition!r}")
    model = fit_task_model(task, grade, settings)
    D = model.dictionary
    C = np.zeros((1, D.dimension))
    base = baseline_config(task, settings)
    vi = D.identity_index[1]
    C[0, vi] = (base.tool_mass + settings.dt * base.tool_damping) * D.scales[1]
    cfg = replace(base, C=C, prediction_steps=settings.lookahead(condition))
    shaper = None
    if condition == "perceptual":
        scale = _reference_force(task, settings)
        prior = None
        if settings.prior_sigma > 0:
            prior = TissuePrior(math.log(scale), settings.prior_tau, settings.prior_sigma * scale)
        dead = settings.deadband_fraction * settings.hyperpriors.kappa_mean or None
        shaper = PerceptualShaper(settings.shaper_sigma_f, settings.shaper_sigma_y, prior=prior,
                                  deadband=dead, map_threshold=0.05 * scale)
    return RenderSession(cfg, model=model, contact=gate, constrain=plant.constrain, shaper=shaper,
                         anticipate=settings.anticipate_contact)


def _reference_force(task: TaskId, s: TrialSettings) -> float:
    if task is TaskId.T1:
        return s.palpation_force
    if task is TaskId.T2:
        return s.wall_force
    _, nominal = _nominal_scales(task, s)
    mid = nominal.pilot_depth + 0.5 * s.feed_rate * (s.duration - s.feed_start)
    return nominal.resistance_coefficient(mid) * s.feed_rate


def _classify(task: TaskId, s: TrialSettings, run, grade: int, observer, rng) -> float:
    """Fraction of presentations in which the observer names the true grade.

    The observer compares the felt force averaged over the hold window with
    the force each grade would produce at the mean true tool state of that
    window (static force law; the feed-rate law for milling); both
    pass through the observer's Stevens map and the felt intensity carries
    Weber-scaled noise.
    """
    k0 = int(round(s.hold_start / s.dt))
    X = run["states"][k0:]
    felt = float(np.mean(-run["rendered"][k0:]))
    name, values = GRADES[task]
    p_mean = float(X[:, 0].mean())
    feed = float(np.maximum(X[:, 1], 0.0).mean())
    depth = float(X[:, 2].mean())
    templates = []
    for v in values:
        g = make_task_model(task, {name: v})
        if task is TaskId.T3:
            templates.append(g.resistance_coefficient(depth) * feed)
        else:
            templates.append(g.static_force(p_mean))
    templates = np.maximum(np.asarray(templates), 1e-9)
    felt = max(felt, 1e-9)
    S_t = observer.intensity(templates)
    S_f = observer.intensity(felt) + observer.discrimination_sd(felt) * rng.standard_normal(s.presentations)
    choice = np.argmin(np.abs(S_f[:, None] - S_t[None, :]), axis=1)
    return float(np.mean(choice == grade))


def run_trial(task, group: str, settings: TrialSettings, seed, condition: str = "adjusted",
              trial_index: int = 0, grade: int = None, return_trace: bool = False):
    """Simulate one trial and score it against the plant's ideal force.

    ``seed`` may be an int or a ``SeedSequence``; the same seed gives the same
    record for every condition (common random numbers across conditions).
    """
    task = TaskId.parse(task)
    mult = settings.group_multiplier(group)
    grade = trial_index % len(GRADES[task][1]) if grade is None else grade
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    sim_seq, obs_seq, cls_seq = seq.spawn(3)
    plant = task_plant(task, grade, settings)
    session = build_session(task, grade, condition, settings)
    run = _closed_loop(task, plant, session, settings, _streams(sim_seq, settings.n_ticks), mult)
    dt = settings.dt
    fm = compute_fidelity_metrics(run["rendered"], run["ideal"], run["states"][:, 1], dt)
    lag = effective_delay(run["rendered"], run["ideal"], dt)
    k0 = int(round(settings.hold_start / dt))
    proto = _Protocol(task, plant, settings)
    if task is TaskId.T3:
        target = run["refs"][k0:]
    else:
        target = np.full(len(run["refs"]) - k0, proto.target_position(settings.duration))
    task_error = float(np.mean(np.abs(run["states"][k0:, 0] - target)))
    observer = sample_observer(settings.hyperpriors, obs_seq)
    acc = _classify(task, settings, run, grade, observer, np.random.default_rng(cls_seq))
    seed_value = int(seq.generate_state(1, np.uint64)[0])
    record = TrialRecord(task=task.short, group=group, trial_index=int(trial_index), seed=seed_value,
                         eps_F=fm["eps_F"], latency=lag, percept_accuracy=acc,
                         task_error=task_error, smoothness_raw=fm["smoothness_raw"],
                         smoothness_norm=fm["smoothness_norm"], user=int(trial_index) // 10,
                         grade=int(grade), condition=condition,
                         compute_time=float(np.median(run["compute"])))
    if return_trace:
        return record, run
    return record
