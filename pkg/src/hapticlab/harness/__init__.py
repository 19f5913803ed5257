"""Experiment orchestration, metrics, statistics and the command line."""

from .campaign import CampaignError, CampaignResult, run_campaign
from .config import CampaignConfig, ConfigError, load_config, parse_config
from .hpi import HpiResult, hpi
from .metrics import MetricError, compute_fidelity_metrics, effective_delay, smoothness_index
from .stats import (AnovaModel, StatsError, bayes_regress, effect_stats, fit_anova, manova_wilks,
                    power_mc)
from .trial import TrialRecord, TrialSettings, run_trial

__all__ = [
    "AnovaModel", "CampaignConfig", "CampaignError", "CampaignResult", "ConfigError", "HpiResult",
    "MetricError", "StatsError", "TrialRecord", "TrialSettings", "bayes_regress",
    "compute_fidelity_metrics", "effect_stats", "effective_delay", "fit_anova", "hpi", "load_config",
    "manova_wilks", "parse_config", "power_mc", "run_campaign", "run_trial", "smoothness_index",
]
