import csv
import dataclasses

import numpy as np
import pytest

from ciuav import trainer
from ciuav.dsp import preprocess
from ciuav.model import NumericError, SisConfig, init_params
from ciuav.synth import SceneConfig, generate_dataset, grid_plan, inject_spikes
from ciuav.trainer import (
    DEFAULT_FRACTIONS,
    DEFAULT_SENSOR_CONFIGS,
    TaskSpec,
    TrainingData,
    TrainingError,
    TrainSchedule,
    ablation_grid,
    build_tasks,
    evaluate,
    mean_predictor_metrics,
    parse_subset,
    sample_sweep,
    subset_label,
    train,
    write_curve_csv,
)


def small_config(data, **kw):
    return SisConfig(f=data.f, f_h=16, hidden_dims=(32,), S=data.S, N_train=len(data), **kw)


@pytest.fixture(scope="module")
def small_data():
    scene = SceneConfig()
    ds = generate_dataset(scene, grid_plan(scene, nx=3, ny=3, frames_per_point=4))
    return TrainingData.from_parts(preprocess(ds), ds)


def test_parse_subset():
    assert parse_subset("1-3", 3) == (True, False, True)
    assert parse_subset([2], 3) == (False, True, False)
    assert subset_label((True, False, True)) == "1-3"
    for bad in ("0", "4", "1-4"):
        with pytest.raises(ValueError):
            parse_subset(bad, 3)


def test_build_tasks_counts():
    assert [t.name for t in build_tasks(["1-2-3"], [1.0])] == ["1-2-3@1"]
    tasks = build_tasks(list(DEFAULT_SENSOR_CONFIGS), [1.0])
    assert [t.name.split("@")[0] for t in tasks] == ["1", "3", "1-3", "1-2-3"]
    assert len(build_tasks(list(DEFAULT_SENSOR_CONFIGS), list(DEFAULT_FRACTIONS))) == 16
    with pytest.raises(ValueError):
        build_tasks([], [1.0])
    with pytest.raises(ValueError):
        build_tasks(["1"], [])


def test_fraction_subsets_nest():
    n = 1500
    sets = [set(TaskSpec("t", (True,), f, 42).sample_indices(n)) for f in DEFAULT_FRACTIONS]
    assert [len(s) for s in sets] == [375, 750, 1125, 1500]
    assert all(a <= b for a, b in zip(sets, sets[1:]))
    again = TaskSpec("t", (True,), 0.5, 42).sample_indices(n)
    np.testing.assert_array_equal(again, sorted(sets[1]))


def test_task_and_schedule_validation():
    with pytest.raises(ValueError):
        TaskSpec("t", (True,), 0.0)
    with pytest.raises(ValueError):
        TaskSpec("t", (False, False))
    t = TaskSpec("t", (True,))
    with pytest.raises(ValueError):
        TrainSchedule((t, t))
    with pytest.raises(ValueError):
        TrainSchedule((t,), task_sampling="random")
    with pytest.raises(ValueError):
        TrainSchedule(())


def test_training_is_deterministic(small_data):
    cfg = small_config(small_data)
    sched = TrainSchedule(tuple(build_tasks(["1", "1-2-3"], [1.0, 0.5])), epochs=3, lr=1e-3)
    p1, r1 = train(small_data, sched, cfg, seed=5)
    p2, r2 = train(small_data, sched, cfg, seed=5)
    assert r1.loss_curve == r2.loss_curve
    assert r1.config_fingerprint == r2.config_fingerprint
    assert p1.fingerprint_bytes() == p2.fingerprint_bytes()
    assert set(r1.per_task) == {t.name for t in sched.tasks}
    _, r3 = train(small_data, sched, cfg, seed=6)
    assert r3.loss_curve != r1.loss_curve


def test_proportional_sampling_runs(small_data):
    cfg = small_config(small_data)
    sched = TrainSchedule(
        tuple(build_tasks(["1", "1-2-3"], [0.25, 1.0])), epochs=2, lr=1e-3, task_sampling="proportional"
    )
    _, result = train(small_data, sched, cfg, seed=1)
    assert len(result.per_task) == 4


def test_memorizes_single_sample(small_data):
    one = TrainingData(small_data.amplitudes[:1], small_data.truths[:1])
    cfg = small_config(one)
    sched = TrainSchedule(tuple(build_tasks(["1-2-3"], [1.0])), epochs=200, lr=1e-3)
    params, _ = train(one, sched, cfg, seed=0)
    assert evaluate(params, one).mae_m < 1e-3


def test_memorizes_a_few_samples(small_data):
    few = TrainingData(small_data.amplitudes[::9][:4], small_data.truths[::9][:4])
    cfg = small_config(few)
    sched = TrainSchedule(tuple(build_tasks(["1-2-3"], [1.0])), epochs=1500, lr=3e-3)
    params, _ = train(few, sched, cfg, seed=0)
    assert evaluate(params, few).mae_m < 0.05


def test_untrained_constant_model_has_nonpositive_r2(small_data):
    cfg = small_config(small_data)
    params = init_params(cfg, np.random.default_rng(0))
    for k in params.tensors:
        if k.startswith("ext."):
            params[k] = np.zeros_like(params[k])
    report = evaluate(params, small_data)
    assert report.r2 <= 0


def test_evaluate_does_not_mutate(small_data):
    cfg = small_config(small_data)
    params = init_params(cfg, np.random.default_rng(0))
    before = params.fingerprint_bytes()
    evaluate(params, small_data, (True, False, False))
    assert params.fingerprint_bytes() == before


def test_mean_predictor_baseline(small_data):
    r = mean_predictor_metrics(small_data.truths, small_data)
    assert r.r2 == pytest.approx(0.0, abs=1e-12)


def test_numeric_failure_names_step_and_task(small_data, monkeypatch):
    calls = {"n": 0}
    real = trainer.gradients

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 4:
            raise NumericError("ext.W0", "gradient")
        return real(*a, **kw)

    monkeypatch.setattr(trainer, "gradients", flaky)
    cfg = small_config(small_data)
    sched = TrainSchedule(tuple(build_tasks(["1", "3"], [1.0])), epochs=1)
    with pytest.raises(TrainingError) as info:
        train(small_data, sched, cfg, seed=0)
    assert info.value.step == 3 and info.value.task == "3@1"
    assert "ext.W0" in str(info.value)


def test_shape_mismatch(small_data):
    cfg = dataclasses.replace(small_config(small_data), N_train=3)
    with pytest.raises(ValueError):
        train(small_data, TrainSchedule(tuple(build_tasks(["1"], [1.0])), epochs=1), cfg)


def test_sweep_single_fraction_equals_full_run(small_data):
    cfg = small_config(small_data)
    sched = TrainSchedule(tuple(build_tasks(["1-2-3"], [1.0])), epochs=3, lr=1e-3)
    ((frac, report),) = sample_sweep(small_data, cfg, [1.0], sched, seed=4)
    params, _ = train(small_data, sched, cfg, seed=4)
    assert frac == 1.0 and report == evaluate(params, small_data)
    with pytest.raises(ValueError):
        sample_sweep(small_data, cfg, [0.5, 0.25], sched)


def test_curve_csv(tmp_path):
    path = tmp_path / "c.csv"
    write_curve_csv([(0.25, 1.5, "1-2-3"), (1, 0.5, "1-2-3")], path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["x", "metric", "task"]
    assert rows[1] == ["0.25", "1.5", "1-2-3"] and len(rows) == 3


def _grid(scene, **kw):
    return grid_plan(scene, nx=4, ny=4, frames_per_point=8, **kw)


def test_dac_is_inert_without_agc():
    scene = SceneConfig(agc_range_db=(0.0, 0.0), rng_seed=3)
    train_raw = generate_dataset(scene, _grid(scene))
    test_raw = generate_dataset(dataclasses.replace(scene, rng_seed=4), _grid(scene))
    assert np.all(train_raw.gains_db() == 0)
    cfg = SisConfig(f=50, f_h=32, hidden_dims=(64,), S=3, N_train=len(train_raw))
    sched = TrainSchedule(tuple(build_tasks(["1-2-3"], [1.0])), epochs=4, lr=1e-3)
    cells = {(c.dac, c.hampel): c.report.lmse_m2 for c in ablation_grid(train_raw, cfg, sched, test_raw, seed=1)}
    for hampel in (False, True):
        off, on = cells[(False, hampel)], cells[(True, hampel)]
        assert abs(on - off) / off < 0.05


def test_hampel_is_nearly_inert_without_spikes():
    scene = SceneConfig(rng_seed=5)
    train_raw = generate_dataset(scene, _grid(scene))
    test_raw = generate_dataset(dataclasses.replace(scene, rng_seed=6), _grid(scene))
    train_raw, log = inject_spikes(train_raw, 0.0, 10.0, 1)
    assert log == []
    data = {h: TrainingData.from_parts(preprocess(train_raw, True, h), train_raw) for h in (False, True)}
    test = {h: TrainingData.from_parts(preprocess(test_raw, True, h), test_raw) for h in (False, True)}
    cfg = SisConfig(f=50, S=3, N_train=len(train_raw))
    sched = TrainSchedule(tuple(build_tasks(list(DEFAULT_SENSOR_CONFIGS), [1.0])), epochs=60, lr=1e-3)
    lmse = {h: evaluate(train(data[h], sched, cfg, seed=2)[0], test[h]).lmse_m2 for h in (False, True)}
    assert abs(lmse[True] - lmse[False]) / lmse[False] < 0.05


def test_desk_scale_run_beats_mean_predictor():
    scene = SceneConfig(rng_seed=21)
    train_raw = generate_dataset(scene, grid_plan(scene))
    test_raw = generate_dataset(dataclasses.replace(scene, rng_seed=22), grid_plan(scene))
    data = TrainingData.from_parts(preprocess(train_raw), train_raw)
    test = TrainingData.from_parts(preprocess(test_raw), test_raw)
    assert len(data) == 1500
    cfg = SisConfig(f=50, S=3, N_train=len(data))
    sched = TrainSchedule(tuple(build_tasks(list(DEFAULT_SENSOR_CONFIGS), [1.0])), epochs=200, lr=1e-3)
    params, result = train(data, sched, cfg, seed=1)
    full = evaluate(params, test)
    baseline = mean_predictor_metrics(data.truths, test)
    assert full.lmse_m2 * 5 <= baseline.lmse_m2
    assert full.lmse_m2 <= evaluate(params, test, parse_subset("1", 3)).lmse_m2
    assert result.loss_curve[-1][1] < result.loss_curve[0][1]
