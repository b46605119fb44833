import json

import numpy as np
import pytest

from obstraj.cli import EXIT_CONFIG, EXIT_OK, main
from obstraj.config import ConfigError, ExperimentConfig, config_from_dict, dump_config, load_config
from obstraj.experiment import describe_trajectory, read_summary_runs, run_experiment, run_seed, trial_seed
from obstraj.spline import UniformSpline, load_spline, save_spline

FAST = {"n_trials": 1, "methods": ["random"], "budget": 0}


# --- config ---------------------------------------------------------------------


def test_defaults_roundtrip(tmp_path):
    cfg = ExperimentConfig()
    path = tmp_path / "c.json"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_nested_override():
    cfg = config_from_dict({"limits": {"v_max": [1.0, 1.0, 1.0, 1.0]}, "noise": {"sigma_p": 0.02}})
    assert cfg.limit_spec().v_max[0] == 1.0
    assert cfg.noise_spec().sigma_p == 0.02
    assert cfg.limits.a_max == ExperimentConfig().limits.a_max


@pytest.mark.parametrize(
    "data, match",
    [
        ({"n_trails": 3}, "n_trails"),
        ({"noise": {"sigma_x": 1.0}}, "noise.sigma_x"),
        ({"methods": ["gradient"]}, "methods"),
        ({"qualities": [0]}, "n_landmarks"),
        ({"budget": -1}, "budget"),
        ({"cam_hz": 30}, "multiple"),
        ({"scalarization": "det"}, "scalarization"),
        ({"limits": 3}, "limits"),
    ],
)
def test_invalid_config_rejected(data, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(data)


def test_bad_json_names_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n"n_trials": 1,\n}')
    with pytest.raises(ConfigError, match="line 3"):
        load_config(p)


def test_seeds_are_distinct_and_shared_across_methods():
    assert trial_seed(0, 0) != trial_seed(0, 1) != trial_seed(1, 0)
    assert run_seed(0, 0, 4) != run_seed(0, 0, 40)
    assert run_seed(3, 2, 4) == run_seed(3, 2, 4)


# --- experiment -------------------------------------------------------------------


@pytest.fixture(scope="module")
def fast_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp")
    cfg = config_from_dict(FAST)
    a = run_experiment(cfg, root / "a")
    b = run_experiment(cfg, root / "b")
    return a, b


def test_single_trial_outputs(fast_runs):
    res, _ = fast_runs
    out = res.out_dir
    assert len(list((out / "splines").glob("*.spline"))) == 1
    assert len(list((out / "runs").glob("*.csv"))) == 3
    assert len(read_summary_runs(out / "summary_runs.csv")) == 3
    assert [row["method"] for row in res.table] == ["random"]
    assert res.failures == []
    assert json.loads((out / "failures.json").read_text()) == []
    assert len(list((out / "plots").glob("error_*.csv"))) == 3


def test_rerun_is_byte_identical(fast_runs):
    a, b = fast_runs
    for name in ("summary_table.csv", "summary_runs.csv", "config.json"):
        assert (a.out_dir / name).read_bytes() == (b.out_dir / name).read_bytes()


def test_summary_columns(fast_runs):
    header = (fast_runs[0].out_dir / "summary_table.csv").read_text().splitlines()[0].split(",")
    expected = ["method", "norm_cost"]
    for q in (4, 40, 400):
        expected += [f"sse_q{q}", f"cost_x_error_q{q}"]
    assert header == expected


def test_finer_pose_noise_lowers_error(fast_runs):
    res = fast_runs[0]
    assert res.mean_error("random", 400) < res.mean_error("random", 4)


# --- trajectory report --------------------------------------------------------------


def test_describe_hover_flags_lever_arm():
    rep = describe_trajectory(UniformSpline(np.zeros((15, 4)), 6, 0.5))
    assert rep.accel_cost == 0.0
    assert all(21 - r >= 3 for r in rep.window_ranks)
    assert all("p_IC" in u for u in rep.unobservable)
    assert "unobservable" in rep.format()


def test_describe_constant_velocity(excited_spline):
    line = UniformSpline(np.outer(np.arange(15), [0.2, 0.1, 0.05, 0.0]), 6, 0.5)
    rep = describe_trajectory(line)
    assert rep.accel_cost == pytest.approx(0.0, abs=1e-20)
    assert rep.max_speed == pytest.approx(np.linalg.norm([0.4, 0.2, 0.1]))
    exc = describe_trajectory(excited_spline)
    assert exc.j_deterministic <= 0 and exc.j_stochastic <= 0


# --- command line -------------------------------------------------------------------


def test_cli_unknown_key_exit_code(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"colour": "red"}))
    assert main(["--config", str(p), "--dump-config"]) == EXIT_CONFIG
    assert "colour" in capsys.readouterr().err


def test_cli_dump_config(capsys):
    assert main(["--dump-config"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["n_trials"] == 6


def test_cli_no_command_is_usage_error():
    assert main([]) == EXIT_CONFIG


def test_cli_gen_optimize_simulate_describe(tmp_path, capsys):
    s = tmp_path / "a.spline"
    assert main(["gen", "--out", str(s), "--seed", "4"]) == EXIT_OK
    assert load_spline(s).n_knots == 15
    o = tmp_path / "b.spline"
    assert main(["optimize", str(s), "--method", "mma", "--budget", "1", "--out", str(o)]) == EXIT_OK
    assert o.exists() and o.with_suffix(".log.csv").exists()
    csv = tmp_path / "err.csv"
    assert main(["simulate", str(o), "--quality", "40", "--out", str(csv), "--seed", "1"]) == EXIT_OK
    assert csv.read_text().startswith("t,ex,ey,ez")
    capsys.readouterr()
    assert main(["describe", str(o)]) == EXIT_OK
    assert "rank" in capsys.readouterr().out


def test_cli_malformed_spline(tmp_path):
    s = tmp_path / "bad.spline"
    s.write_text("order 6\n")
    assert main(["describe", str(s)]) == EXIT_CONFIG


def test_cli_free_fall_is_run_failure(tmp_path):
    t = 0.5 * np.arange(15)
    knots = np.zeros((15, 4))
    knots[:, 2] = -0.5 * 9.81 * t**2
    s = tmp_path / "fall.spline"
    save_spline(UniformSpline(knots, 6, 0.5), s)
    assert main(["simulate", str(s), "--out", str(tmp_path / "e.csv")]) == 1


def test_cli_experiment_restricted(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_trials": 1, "budget": 0}))
    out = tmp_path / "run"
    rc = main(["experiment", "--config", str(cfg), "--method", "random", "--quality", "40", "--out", str(out)])
    assert rc == EXIT_OK
    rows = read_summary_runs(out / "summary_runs.csv")
    assert [(r["method"], r["quality"]) for r in rows] == [("random", 40)]
