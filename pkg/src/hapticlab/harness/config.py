"""INI configuration for campaigns and the command line.

Sections mirror the package modules. Every key is optional; missing keys take
the defaults below, and unknown keys are rejected so typos do not pass
silently. ``default_config_text()`` prints a fully populated file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from ..percept import Hyperpriors
from .trial import TrialSettings


class ConfigError(ValueError):
    """Malformed configuration file."""


# TrialSettings field -> section
_SECTIONS = {
    "dynamics": ("dt", "duration", "ramp_time", "hold_start", "palpation_force", "wall_force",
                 "wall_start", "feed_rate", "feed_start", "position_noise_sd",
                 "velocity_noise_sd", "velocity_from_position"),
    "koopman": ("dictionary_degree", "training_runs", "training_seed"),
    "render": ("filter_time_constant", "latency_tau", "convergence_gain", "prediction_steps",
               "anticipate_contact"),
    "percept": ("shaper_sigma_f", "shaper_sigma_y", "prior_tau", "prior_sigma",
                "deadband_fraction", "shaper_extra_steps", "presentations"),
    "harness": ("force_gain", "integral_gain", "track_kp", "track_kd", "motor_noise_sd",
                "motor_noise_tc"),
}
_HYPER = tuple(f.name for f in fields(Hyperpriors))


@dataclass(frozen=True)
class ContactCheckSettings:
    stiffness: float = 1000.0
    damping: float = 5.0
    tool_mass: float = 0.05
    dt: float = 1e-3
    duration: float = 10.0
    grid_size: int = 32
    spacing: float = 1e-3


@dataclass(frozen=True)
class FemCheckSettings:
    youngs_modulus: float = 5.0e4
    section: float = 1.0e-4
    length: float = 0.1
    n_elements: int = 8
    tip_load: float = 0.5


@dataclass(frozen=True)
class CampaignConfig:
    settings: TrialSettings = field(default_factory=TrialSettings)
    master_seed: int = 20240601
    trials: int = 100
    n_boot: int = 10000
    power_replicates: int = 1000
    plots: bool = False
    contact: ContactCheckSettings = field(default_factory=ContactCheckSettings)
    fem: FemCheckSettings = field(default_factory=FemCheckSettings)

    def __post_init__(self):
        if self.trials < 2:
            raise ConfigError("trials must be at least 2")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer")
        if self.power_replicates < 100:
            raise ConfigError("power_replicates must be at least 100")


def _coerce(value: str, template):
    if isinstance(template, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    return value


def _take(section, obj, allowed, where):
    out = {}
    for key, raw in section.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in [{where}]")
        try:
            out[key] = _coerce(raw, getattr(obj, key))
        except ValueError as exc:
            raise ConfigError(f"[{where}] {key}: {exc}") from exc
    return out


def parse_config(text: str) -> CampaignConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    known = set(_SECTIONS) | {"contact", "fem"}
    for name in cp.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")
    base = TrialSettings()
    cfg = CampaignConfig()
    st, hyper, top = {}, {}, {}
    for name, keys in _SECTIONS.items():
        if not cp.has_section(name):
            continue
        sec = dict(cp.items(name))
        if name == "percept":
            for k in [k for k in sec if k in _HYPER]:
                hyper[k] = float(sec.pop(k))
        if name == "harness":
            for k in ("master_seed", "trials", "n_boot", "power_replicates", "plots"):
                if k in sec:
                    top[k] = _coerce(sec.pop(k), getattr(cfg, k))
            groups = {}
            for g in ("novice", "intermediate", "expert"):
                key = f"noise_{g}"
                if key in sec:
                    groups[g] = float(sec.pop(key))
            if groups:
                merged = dict(base.group_noise) | groups
                st["group_noise"] = tuple(merged.items())
        st.update(_take(sec, base, keys, name))
    if hyper:
        st["hyperpriors"] = replace(Hyperpriors(), **hyper)
    try:
        settings = replace(base, **st)
        extra = {}
        if cp.has_section("contact"):
            extra["contact"] = replace(cfg.contact, **_take(dict(cp.items("contact")), cfg.contact,
                                                           {f.name for f in fields(ContactCheckSettings)},
                                                           "contact"))
        if cp.has_section("fem"):
            extra["fem"] = replace(cfg.fem, **_take(dict(cp.items("fem")), cfg.fem,
                                                   {f.name for f in fields(FemCheckSettings)}, "fem"))
        return replace(cfg, settings=settings, **top, **extra)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> CampaignConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def default_config_text(cfg: CampaignConfig = None) -> str:
    """Populated INI file for ``cfg`` (defaults when omitted)."""
    cfg = cfg or CampaignConfig()
    s = cfg.settings
    lines = ["# hapticlab configuration; every key is optional", ""]
    for name, keys in _SECTIONS.items():
        lines.append(f"[{name}]")
        if name == "harness":
            for k in ("master_seed", "trials", "n_boot", "power_replicates", "plots"):
                lines.append(f"{k} = {getattr(cfg, k)}")
            for g, m in s.group_noise:
                lines.append(f"noise_{g} = {m!r}")
        for k in keys:
            lines.append(f"{k} = {getattr(s, k)!r}")
        if name == "percept":
            for k in _HYPER:
                lines.append(f"{k} = {getattr(s.hyperpriors, k)!r}")
        lines.append("")
    for name, obj in (("contact", cfg.contact), ("fem", cfg.fem)):
        lines.append(f"[{name}]")
        lines += [f"{f.name} = {getattr(obj, f.name)!r}" for f in fields(obj)]
        lines.append("")
    return "\n".join(lines)
