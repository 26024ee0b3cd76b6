import json

import numpy as np
import pytest

from erasure_fl.analysis import delta_metrics
from erasure_fl.errors import DivergenceError, InvalidConfigError
from erasure_fl.sim import (
    CSV_COLUMNS,
    ExperimentConfig,
    TrialOutcome,
    compare_strategies,
    config_json,
    metrics_csv,
    replay,
    rounds_to_threshold,
    run_experiment,
    summarize,
    sweep,
    sweep_outcomes,
    trial_seed,
    worker_count,
    write_metrics_csv,
)

SMALL = ExperimentConfig(devices=3, per_device=60, rounds=40, eta=0.01, epsilon=0.3)


def test_error_free_quadratic_converges_monotonically():
    cfg = ExperimentConfig(strategy="error-free", eta="1/L", rounds=400, per_device=200, x_min=-1, x_max=2)
    res = run_experiment(cfg)
    d = res.delta
    above = np.flatnonzero(d[:-1] >= 1e-20)
    assert np.all(d[above + 1] < d[above])
    assert d.min() < 1e-20


def test_zero_epsilon_strategies_bit_identical():
    out = compare_strategies(SMALL.replace(epsilon=0.0), ["error-free", "memoryless", "stale-reuse"])
    ref = out["error-free"].trajectory
    assert all(np.array_equal(r.trajectory, ref) for r in out.values())


def test_metrics_csv_is_reproducible(tmp_path):
    a, b = run_experiment(SMALL), run_experiment(SMALL)
    write_metrics_csv([a], tmp_path / "a.csv")
    write_metrics_csv([b], tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_csv_layout():
    res = run_experiment(SMALL)
    lines = metrics_csv([res]).splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == SMALL.rounds + 1
    first = dict(zip(CSV_COLUMNS, lines[1].split(",")))
    assert first["round"] == "1" and first["strategy"] == "stale-reuse" and first["epsilon"] == "0.29999999999999999"
    assert first["mse_test"] == ""
    assert int(first["received_count"]) == first["pattern_bits"].count("1")


def test_common_random_numbers():
    out = compare_strategies(SMALL, ["error-free", "memoryless", "stale-reuse"])
    drawn = out["memoryless"].drawn_patterns
    assert all(np.array_equal(r.drawn_patterns, drawn) for r in out.values())
    assert np.array_equal(out["stale-reuse"].patterns, drawn)
    assert out["error-free"].patterns.all()
    assert np.array_equal(out["memoryless"].dataset.pooled().features, out["stale-reuse"].dataset.pooled().features)


def test_single_strategy_compare_equals_run():
    res = compare_strategies(SMALL, ["memoryless"])["memoryless"]
    assert metrics_csv([res]) == metrics_csv([run_experiment(SMALL.replace(strategy="memoryless"))])


@pytest.mark.parametrize("strategy", ["error-free", "memoryless", "stale-reuse"])
def test_replay_audit(strategy):
    res = run_experiment(SMALL.replace(strategy=strategy, epsilon=0.5, tau=3))
    assert np.array_equal(replay(res), res.trajectory)


def test_force_first_round_error_free():
    cfg = SMALL.replace(epsilon=1.0, force_first_round_error_free=True)
    res = run_experiment(cfg)
    assert res.patterns[0].all() and not res.patterns[1:].any()
    assert not res.drawn_patterns.any()
    # memoryless keeps the previous global whenever nothing arrives
    ml = run_experiment(cfg.replace(strategy="memoryless"))
    assert np.all(ml.trajectory[2:] == ml.trajectory[1])


def test_metric_consistency():
    res = run_experiment(SMALL)
    d, db = delta_metrics(res.trajectory, res.w_star)
    assert np.array_equal(d, res.delta) and np.array_equal(db, res.delta_bar)
    for m in res.metrics:
        assert 0 <= m.received_count <= 3
        assert m.delta == res.delta[m.round] and m.delta_bar == res.delta_bar[m.round - 1]
    assert res.f0_gap() >= 0


def test_held_out_metrics():
    res = run_experiment(SMALL.replace(test_per_device=50))
    assert np.all(np.isfinite(res.test_series()))
    blobs = ExperimentConfig(
        dataset="blobs", model="softmax-xent", reg=1e-3, devices=3, per_device=40, test_per_device=40, rounds=20, eta=0.5
    )
    acc = run_experiment(blobs).test_series()
    assert np.all((acc >= 0) & (acc <= 1))


def test_per_device_epsilons():
    res = run_experiment(SMALL.replace(epsilon=(0.0, 1.0, 0.0), rounds=30))
    assert res.patterns[:, 0].all() and not res.patterns[:, 1].any() and res.patterns[:, 2].all()


def test_divergence_carries_context():
    with pytest.raises(DivergenceError) as exc:
        run_experiment(SMALL.replace(eta=50.0, rounds=400))
    assert exc.value.round_index is not None and exc.value.device is not None


def test_init_vector():
    res = run_experiment(SMALL.replace(init=(1.0, 2.0), rounds=1))
    assert np.array_equal(res.trajectory[0], [1.0, 2.0])
    with pytest.raises(InvalidConfigError):
        run_experiment(SMALL.replace(init=(1.0,)))


@pytest.mark.parametrize(
    "changes",
    [
        dict(rounds=0),
        dict(eta=0.0),
        dict(eta="2/L"),
        dict(tau=-1),
        dict(epsilon=1.5),
        dict(epsilon=(0.1, 0.2)),
        dict(strategy="fedprox"),
        dict(dataset="mnist"),
        dict(dataset="blobs"),
        dict(dataset="csv"),
        dict(init="ones"),
    ],
)
def test_config_validation(changes):
    with pytest.raises(InvalidConfigError):
        SMALL.replace(**changes)


def test_config_round_trip():
    cfg = SMALL.replace(epsilon=(0.1, 0.2, 0.3), init=(0.5, 0.5), eta="1/L")
    assert ExperimentConfig.from_dict(json.loads(config_json(cfg))) == cfg
    with pytest.raises(InvalidConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"devicez": 3})


def test_rounds_to_threshold():
    assert rounds_to_threshold([5.0, 3.0, 1.005, 1.0], 1.0) == 2
    assert rounds_to_threshold([5.0, 3.0], 1.0) is None
    assert rounds_to_threshold([1.0], 1.0) == 0


def test_trial_seeds_distinct_and_stable():
    seeds = [trial_seed(7, t) for t in range(100)]
    assert len(set(seeds)) == 100
    assert seeds == [trial_seed(7, t) for t in range(100)]
    assert trial_seed(7, 0) != trial_seed(8, 0)


def test_single_point_sweep_equals_run():
    (o,) = sweep_outcomes(SMALL, "epsilon", [0.3], 1, workers=1)
    res = run_experiment(SMALL.replace(seed=trial_seed(SMALL.seed, 0)))
    assert o.final_mse == res.final_mse and o.seed == res.config.seed


def test_parallel_sweep_matches_sequential():
    seq = sweep_outcomes(SMALL, "tau", [1, 2], 3, workers=1)
    par = sweep_outcomes(SMALL, "tau", [1, 2], 3, workers=2)
    assert seq == par
    assert [(o.value, o.trial) for o in par] == [(v, t) for v in (1, 2) for t in range(3)]


def test_sweep_device_count():
    points = sweep(SMALL.replace(rounds=10), "N", [1, 4], 2, workers=1)
    assert [p.value for p in points] == [1, 4]


def test_sweep_validation():
    with pytest.raises(InvalidConfigError):
        sweep_outcomes(SMALL, "gamma", [1.0], 1)
    with pytest.raises(InvalidConfigError):
        sweep_outcomes(SMALL, "eta", [0.1], 0)


def test_summary_censors_unreached():
    outs = [TrialOutcome(0.1, 0, 1, 2.0, 10), TrialOutcome(0.1, 1, 2, 4.0, None)]
    (p,) = summarize(outs, rounds=50)
    assert p.rounds_mean == 30.5 and p.unreached == 1 and p.final_mse_mean == 3.0


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("ERASURE_FL_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("ERASURE_FL_THREADS", "0")
    assert worker_count() >= 1
    monkeypatch.setenv("ERASURE_FL_THREADS", "many")
    with pytest.raises(InvalidConfigError):
        worker_count()


def test_epsilon_sweep_rounds_non_decreasing():
    cfg = ExperimentConfig(per_device=100, rounds=600, eta=0.01, tau=1, seed=3)
    points = sweep(cfg, "epsilon", [0.1, 0.3, 0.5], 50)
    rounds = [p.rounds_mean for p in points]
    assert rounds == sorted(rounds), rounds


def test_tau_sweep_rounds_non_increasing():
    cfg = ExperimentConfig(per_device=200, rounds=600, eta=0.005, strategy="error-free")
    points = sweep(cfg, "tau", [1, 10], 5)
    assert points[1].rounds_mean <= points[0].rounds_mean
