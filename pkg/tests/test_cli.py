import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from glas.cli import EXIT_FORMAT, EXIT_MISSING, EXIT_UNSOLVED, EXIT_USAGE, field_rows, main
from glas.observation import ObsCaps
from glas.policy import init_weights, save_weights
from glas.safety import SafetyParams
from glas.sim import BarrierPolicy
from glas.world import EnvInstance, closest_point_on_obstacle, load_env, save_env


def _run(tmp_path, name, *args):
    out = tmp_path / name
    code = main([*args, "--out-dir", str(out), "--jobs", "1"])
    return code, out


def _error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert line.startswith("GLAS-ERROR ")
    return json.loads(line[len("GLAS-ERROR "):])


def _csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# glas-")
    return list(csv.DictReader(x for x in lines if not x.startswith("#")))


def test_gen_env_twice_is_identical(tmp_path):
    c1, a = _run(tmp_path, "a", "gen-env", "--robots", "8", "--obst", "0.1", "--seed", "7")
    c2, b = _run(tmp_path, "b", "gen-env", "--robots", "8", "--obst", "0.1", "--seed", "7")
    assert c1 == c2 == 0
    assert (a / "env.json").read_bytes() == (b / "env.json").read_bytes()
    assert load_env(a / "env.json").n_robots == 8
    assert (a / "run_config.json").exists()


def test_plan_and_rollout(tmp_path):
    _, e = _run(tmp_path, "e", "gen-env", "--robots", "3", "--seed", "2")
    code, p = _run(tmp_path, "p", "plan", "--env", str(e / "env.json"))
    assert code == 0
    rows = _csv(p / "plan.csv")
    assert {r["robot"] for r in rows} == {"0", "1", "2"}
    code, r = _run(tmp_path, "r", "rollout", "--env", str(e / "env.json"))
    assert code == 0
    m = _csv(r / "metrics.csv")
    assert 0 <= int(m[0]["r_s"]) <= 3 and m[0]["wall_ms"] == "nan"
    assert "t_final_s=" in (r / "metrics.csv").read_text().splitlines()[1]
    t = _csv(r / "trajectory.csv")
    assert list(t[0]) == ["robot", "t", "x", "y", "vx", "vy", "ux", "uy", "alpha", "min_h"]


def test_dataset_train_eval_pipeline(tmp_path):
    code, d = _run(tmp_path, "d", "build-dataset", "--robots", "2", "--obst", "0.1", "--instances", "3")
    assert code == 0
    inst = _csv(d / "instances.csv")
    assert len(inst) == 3
    code, t = _run(tmp_path, "t", "train", "--dataset", str(d / "dataset.bin"), "--epochs", "2", "--batch-size", "64",
                   "--hidden", "8", "--latent", "4")
    assert code == 0
    loss = _csv(t / "loss.csv")
    assert [r["epoch"] for r in loss] == ["1", "2"]
    code, ev = _run(tmp_path, "ev", "eval", "--policies", "net,barrier", "--weights", f"net={t / 'weights.json'}",
                    "--robots", "2", "--obst", "0.1", "--per-case", "2", "--t-final-s", "5")
    assert code == 0
    rows = _csv(ev / "metrics.csv")
    assert sorted({r["policy"] for r in rows}) == ["barrier", "net"] and len(rows) == 4
    summary = _csv(ev / "summary.csv")
    assert len(summary) == 2
    assert (ev / "effort_pairs.csv").read_text().splitlines()[1].startswith("policy_a,policy_b")
    cfg = json.loads((t / "run_config.json").read_text())
    assert cfg["train"]["epochs"] == 2 and cfg["safety"]["r_safe"] == 0.15


def test_missing_dataset(tmp_path, capsys):
    code, _ = _run(tmp_path, "x", "train", "--mode", "end_to_end", "--dataset", str(tmp_path / "nope.bin"))
    assert code == EXIT_MISSING
    assert _error(capsys)["code"] == "missing_file"


def test_bad_flag_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen-env", "--robots", "two"])
    assert e.value.code == EXIT_USAGE
    assert _error(capsys)["exit"] == EXIT_USAGE


def test_missing_required_flag(tmp_path, capsys):
    code, _ = _run(tmp_path, "x", "gen-env")
    assert code == EXIT_USAGE and "--robots" in _error(capsys)["message"]


def test_corrupt_inputs(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    code, _ = _run(tmp_path, "x", "rollout", "--env", str(bad))
    assert code == EXIT_FORMAT
    ds = tmp_path / "bad.bin"
    ds.write_bytes(b"NOTADATASET!!")
    code, _ = _run(tmp_path, "y", "train", "--dataset", str(ds))
    assert code == EXIT_FORMAT


def test_weights_dynamics_mismatch(tmp_path, capsys):
    w = tmp_path / "w.json"
    save_weights(init_weights(0, "single"), w)
    _, e = _run(tmp_path, "e", "gen-env", "--robots", "2", "--dynamics", "double")
    code, _ = _run(tmp_path, "r", "rollout", "--env", str(e / "env.json"), "--dynamics", "double", "--policy", str(w))
    assert code == EXIT_FORMAT
    assert "shape mismatch" in _error(capsys)["message"]


def test_unsolved_instance(tmp_path, capsys):
    cells = [[x, y] for x in range(3) for y in range(3) if (x, y) != (1, 1)]
    path = tmp_path / "walled.json"
    save_env(EnvInstance((0, 0, 8, 8), cells, [[1.5, 1.5]], [[6.5, 6.5]]), path)
    code, _ = _run(tmp_path, "p", "plan", "--env", str(path))
    assert code == EXIT_UNSOLVED


def test_config_replay_overrides_flags(tmp_path):
    _, a = _run(tmp_path, "a", "gen-env", "--robots", "4", "--seed", "3")
    code, b = _run(tmp_path, "b", "gen-env", "--robots", "9", "--config", str(a / "run_config.json"))
    assert code == 0
    assert (a / "env.json").read_bytes() == (b / "env.json").read_bytes()
    assert (a / "run_config.json").read_bytes() == (b / "run_config.json").read_bytes()


def test_config_for_other_command(tmp_path):
    _, a = _run(tmp_path, "a", "gen-env", "--robots", "2")
    _, e = _run(tmp_path, "e", "gen-env", "--robots", "2")
    code, _ = _run(tmp_path, "p", "plan", "--env", str(e / "env.json"), "--config", str(a / "run_config.json"))
    assert code == EXIT_FORMAT


def test_plot_field_examples(tmp_path):
    env = EnvInstance((0, 0, 8, 8), [], [[1.0, 1.0]], [[4.0, 4.0]])
    rows = list(field_rows(env, BarrierPolicy(), SafetyParams(), ObsCaps(), 2))
    assert len(rows) == 4
    for x, y, ux, uy, blocked in rows:
        assert not blocked
        to_goal = np.array([4.0 - x, 4.0 - y])
        u = np.array([ux, uy])
        assert np.allclose(u / np.linalg.norm(u), to_goal / np.linalg.norm(to_goal))


def test_plot_field_repels_near_obstacle(tmp_path):
    # with k_c > 0 the barrier strictly decreases, so the obstacle-ward component is negative
    params = SafetyParams(k_c=0.1)
    env = EnvInstance((0, 0, 8, 8), [[3, 3]], [[1.0, 1.0]], [[7.0, 7.0]])
    rows = list(field_rows(env, BarrierPolicy(), params, ObsCaps(), 80))
    checked = 0
    for x, y, ux, uy, blocked in rows:
        p = np.array([x, y])
        pbar = closest_point_on_obstacle(p, [3, 3]) - p
        d = np.linalg.norm(pbar)
        if blocked:
            assert math.isnan(ux) and d <= params.r_safe
            continue
        if d - params.r_safe < params.delta_r:
            checked += 1
            assert np.dot([ux, uy], pbar) < 0
    assert checked > 0


def test_plot_field_cli(tmp_path):
    _, e = _run(tmp_path, "e", "gen-env", "--robots", "1", "--obst", "0.2", "--seed", "1")
    code, f = _run(tmp_path, "f", "plot-field", "--env", str(e / "env.json"), "--grid", "5")
    assert code == 0
    rows = _csv(f / "field.csv")
    assert len(rows) == 25 and list(rows[0]) == ["x", "y", "ux", "uy", "blocked"]


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "glas.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-env", "plan", "build-dataset", "train", "rollout", "eval", "plot-field"):
        assert cmd in out.stdout
