from dataclasses import replace

import numpy as np
import pytest

from hapticlab.harness.trial import (CONDITIONS, RECORD_COLUMNS, TrialRecord, TrialSettings,
                                     build_session, run_trial)

QUIET = replace(TrialSettings(), motor_noise_sd=0.0, position_noise_sd=0.0)


@pytest.mark.parametrize("task", ["T1", "T2", "T3"])
def test_unfiltered_undelayed_pipeline_matches_ideal(task):
    rec = run_trial(task, "intermediate", QUIET, 1, condition="oracle")
    assert rec.eps_F <= 1e-12


def test_same_seed_same_record():
    a = run_trial("T2", "novice", TrialSettings(), 123, condition="perceptual", trial_index=4)
    b = run_trial("T2", "novice", TrialSettings(), 123, condition="perceptual", trial_index=4)
    fields = {k: getattr(a, k) for k in RECORD_COLUMNS}
    assert fields == {k: getattr(b, k) for k in RECORD_COLUMNS}
    c = run_trial("T2", "novice", TrialSettings(), 124, condition="perceptual", trial_index=4)
    assert c.eps_F != a.eps_F


def test_record_invariants():
    for cond in CONDITIONS:
        r = run_trial("T1", "expert", TrialSettings(), 5, condition=cond)
        assert r.eps_F >= 0 and 0 <= r.percept_accuracy <= 1 and r.task_error >= 0
        assert 0 < r.smoothness_norm <= 1 and r.condition == cond
    with pytest.raises(ValueError):
        TrialRecord("T1", "expert", 0, 0, -1.0, 0.0, 0.5, 0.0, 0.0, 1.0)


def test_group_noise_ordering_in_task_error():
    s = TrialSettings()
    err = {g: np.mean([run_trial("T1", g, s, k, condition="adjusted").task_error for k in range(12)])
           for g in ("novice", "expert")}
    assert err["novice"] > err["expert"]


def test_unknown_inputs_rejected():
    with pytest.raises(ValueError):
        run_trial("T1", "guru", TrialSettings(), 0)
    with pytest.raises(ValueError):
        build_session("T1", 2, "magic", TrialSettings())


def test_trace_shapes():
    s = TrialSettings()
    rec, run = run_trial("T3", "intermediate", s, 9, return_trace=True)
    n = s.n_ticks
    assert run["states"].shape[0] == n and len(run["rendered"]) == n == len(run["ideal"])
    assert np.isfinite(run["rendered"]).all()
