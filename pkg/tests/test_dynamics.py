import numpy as np
import pytest
from hypothesis import given, strategies as st

from hapticlab.dynamics import (LinearPlant, PlantError, SimulationError, TaskId, make_task_model,
                                read_trajectory_csv, simulate_trajectory, write_trajectory_csv)


def test_palpation_secant_stiffness_tends_to_k1():
    plant = make_task_model("T1", youngs_modulus=5e3)
    # flat-punch conversion with a 2 mm radius and nu = 0.5, worked by hand
    k1 = 2 * 2e-3 * 5e3 / (1 - 0.25)
    assert plant.k1 == pytest.approx(k1, rel=1e-15)
    delta = 1e-7
    assert plant.tissue_force(delta) / delta == pytest.approx(k1, rel=1e-8)


def test_wall_zero_force_out_of_contact():
    plant = make_task_model("T2", wall_stiffness=1e4)
    assert plant.contact_force((-1e-3, 0.5, 0.0)) == 0.0
    assert plant.contact_force((0.0, -0.1, 0.0)) == 0.0
    assert plant.contact_force((1e-4, 0.0, 1e-4)) == pytest.approx(-1.0)


def test_milling_resistance_linear_in_feed_rate_and_density():
    plant = make_task_model("T3", bone_density=1.8)
    d = 1e-3
    f1 = plant.contact_force((d, 0.01, d))
    f2 = plant.contact_force((d, 0.02, d))
    assert f1 < 0
    assert f2 == pytest.approx(2 * f1, rel=1e-14)
    heavier = make_task_model("T3", bone_density=3.6)
    assert heavier.contact_force((d, 0.01, d)) == pytest.approx(2 * f1, rel=1e-14)


def test_task_id_parsing_and_errors():
    assert TaskId.parse("T1_palpation") is TaskId.T1
    assert TaskId.parse("t3") is TaskId.T3
    with pytest.raises(PlantError):
        make_task_model("T9")
    with pytest.raises(PlantError):
        make_task_model("T1", youngs_modulus=-1.0)
    with pytest.raises(PlantError):
        make_task_model("T2", wall_stiffness=0.0)
    with pytest.raises(PlantError):
        make_task_model("T1", colour="red")


def test_rest_state_is_fixed_point():
    plant = make_task_model("T1")
    tr = simulate_trajectory(plant, 0.0, 0.5, 1e-3, seed=3)
    assert np.all(tr.states == 0.0)


def test_same_seed_identical_trajectory():
    plant = make_task_model("T1", process_noise_sd=(0.0, 0.01, 0.0), measurement_noise_sd=(1e-5,) * 3)
    a = simulate_trajectory(plant, 0.3, 0.2, 1e-3, seed=11)
    b = simulate_trajectory(plant, 0.3, 0.2, 1e-3, seed=11)
    c = simulate_trajectory(plant, 0.3, 0.2, 1e-3, seed=12)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.outputs, b.outputs)
    assert not np.array_equal(a.outputs, c.outputs)


def test_step_indentation_settles_on_fine_step_reference():
    plant = make_task_model("T1")
    coarse = simulate_trajectory(plant, 0.5, 1.0, 1e-3, seed=0)
    fine = simulate_trajectory(plant, 0.5, 1.0, 1e-3, seed=0, substeps=100)
    tail = slice(-100, None)
    for j in (0, 2):  # position and indentation
        err = np.abs(coarse.states[tail, j] - fine.states[tail, j]).max()
        assert err <= 1e-4 * np.abs(fine.states[tail, j]).max()


def test_halving_dt_reduces_error_first_order():
    plant = make_task_model("T1")
    ref = simulate_trajectory(plant, 0.5, 0.2, 1e-3, seed=0, substeps=400)
    errs = []
    for sub in (1, 2):
        tr = simulate_trajectory(plant, 0.5, 0.2, 1e-3 / sub, seed=0)
        errs.append(np.abs(tr.states[::sub] - ref.states).max())
    assert errs[0] / errs[1] >= 1.8


@pytest.mark.parametrize("task", ["T1", "T2"])
def test_zero_input_energy_non_increasing(task):
    plant = make_task_model(task)
    x0 = (2e-3, -0.05, 1e-3) if task == "T1" else (1e-4, 0.1, 1e-4)
    tr = simulate_trajectory(plant, 0.0, 0.5, 1e-3, seed=0, x0=x0)
    e = np.array([plant.energy(x) for x in tr.states])
    assert np.diff(e).max() <= 1e-9


@given(st.floats(0.0, 2.0), st.floats(1e-4, 5e-3))
def test_palpation_indentation_non_negative(u, pos):
    plant = make_task_model("T1")
    tr = simulate_trajectory(plant, u, 0.05, 1e-3, seed=0, x0=(pos, 0.0, 0.0))
    assert np.all(tr.states[:, 2] >= 0.0)


def test_non_finite_state_reports_step():
    plant = LinearPlant(A=((0, 1, 0), (1e8, 0, 0), (0, 0, 0)))
    with pytest.raises(SimulationError) as info, np.errstate(over="ignore", invalid="ignore"):
        simulate_trajectory(plant, 1.0, 1.0, 1e-2, seed=0)
    assert info.value.step > 0


def test_trajectory_csv_roundtrip(tmp_path):
    plant = make_task_model("T2", measurement_noise_sd=(1e-6, 1e-4, 0.0))
    tr = simulate_trajectory(plant, lambda t, y: 0.5, 0.05, 1e-3, seed=2, x0=(-1e-4, 0.0, 0.0))
    path = tmp_path / "traj.csv"
    write_trajectory_csv(tr, path)
    header = path.read_text().splitlines()[0].split(",")
    assert header[0] == "t" and "u_0" in header
    back = read_trajectory_csv(path)
    assert np.allclose(back.states, tr.states, rtol=1e-8, atol=1e-12)
    assert np.allclose(back.outputs, tr.outputs, rtol=1e-8, atol=1e-12)
    assert back.dt == pytest.approx(1e-3)
