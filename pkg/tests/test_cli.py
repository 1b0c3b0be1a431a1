import json

import numpy as np
import pytest

from spf_empc import cli, costs
from spf_empc.sim import SCHEMA_LINE, SUMMARY_COLUMNS
from spf_empc.world import SCHEMA_VERSION


def small_scenario(tmp_path, timeout=3.0):
    data = {
        "schema": SCHEMA_VERSION,
        "arena": {"xmin": -5, "xmax": 5, "ymin": -5, "ymax": 5},
        "robots": [{"start": [-1.0, 0.0, 0.0], "goal": [1.0, 0.0]}],
        "static_obstacles": [],
        "dynamic_obstacles": [{"position": [0.0, 3.0], "velocity": [0.3, 0.0], "radius": 0.2}],
        "noise": {"scale": 1.0},
        "timeout": timeout, "seed": 0, "config": {},
    }
    path = tmp_path / "small.json"
    path.write_text(json.dumps(data))
    return path


def files_of(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_missing_scenario_exits_nonzero(tmp_path, capsys):
    code = cli.main(["run", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert code != 0
    assert "error" in capsys.readouterr().err


def test_bad_scenario_reports_field(tmp_path, capsys):
    p = small_scenario(tmp_path)
    data = json.loads(p.read_text())
    del data["robots"][0]["goal"]
    p.write_text(json.dumps(data))
    assert cli.main(["run", "--scenario", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "robots[0]" in capsys.readouterr().err


def test_run_is_byte_identical(tmp_path):
    sc = small_scenario(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--scenario", str(sc), "--seed", "3", "--out", str(a)]) == 0
    assert cli.main(["run", "--scenario", str(sc), "--seed", "3", "--out", str(b)]) == 0
    fa, fb = files_of(a), files_of(b)
    assert fa == fb
    assert "metrics_seed3_noise1.csv" in fa
    assert all(v.startswith(SCHEMA_LINE.encode()) for v in fa.values())


def test_override_noise_scale_names_outputs(tmp_path):
    sc = small_scenario(tmp_path)
    out = tmp_path / "o"
    assert cli.main(["run", "--scenario", str(sc), "--override", "noise.scale=0.25",
                     "--out", str(out)]) == 0
    assert (out / "robots_seed0_noise0.25.csv").exists()


def test_export_writes_trace_and_scenario(tmp_path):
    sc = small_scenario(tmp_path, timeout=1.0)
    out = tmp_path / "e"
    assert cli.main(["export", "--scenario", str(sc), "--seed", "2", "--out", str(out)]) == 0
    lines = (out / "trajectories_seed2_noise1.csv").read_text().splitlines()
    assert lines[0] == SCHEMA_LINE and lines[1] == "plan_time,robot,t,x,y,vx,vy"
    assert len(lines) > 2
    assert json.loads((out / "scenario_seed2.json").read_text())["seed"] == 2


def test_env_out_dir(tmp_path, monkeypatch):
    sc = small_scenario(tmp_path, timeout=0.5)
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["run", "--scenario", str(sc)]) == 0
    assert (tmp_path / "env" / "metrics_seed0_noise1.csv").exists()
    # --out wins over the environment
    assert cli.output_dir(str(tmp_path / "flag")) == tmp_path / "flag"


def test_parse_seeds():
    assert cli.parse_seeds("3") == [0, 1, 2]
    assert cli.parse_seeds("3,5,7") == [3, 5, 7]
    assert cli.parse_seeds("10-12") == [10, 11, 12]
    with pytest.raises(ValueError):
        cli.parse_seeds("0")


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0] == SCHEMA_LINE
    return lines[1].split(","), [l.split(",") for l in lines[2:]]


def test_batch_single_seed(tmp_path, capsys):
    sc = small_scenario(tmp_path, timeout=8.0)
    out = tmp_path / "b"
    argv = ["batch", "--scenario", str(sc), "--seeds", "1", "--jobs", "1", "--out", str(out)]
    assert cli.main(argv) == 0
    header, rows = read_csv(out / "summary.csv")
    assert tuple(header) == SUMMARY_COLUMNS
    row = dict(zip(header, rows[0]))
    assert row["runs"] == "1"
    assert row["SR"] == "100.0"
    assert row["travel_time_mean"] == row["travel_time_min"]
    assert float(row["travel_time_std"]) == 0.0
    first = files_of(out)
    assert cli.main(argv) == 0
    assert files_of(out) == first
    assert ",".join(SUMMARY_COLUMNS) in capsys.readouterr().out


def test_batch_two_scales_two_rows(tmp_path):
    sc = small_scenario(tmp_path, timeout=1.0)
    out = tmp_path / "b"
    assert cli.main(["batch", "--scenario", str(sc), "--seeds", "2", "--jobs", "1",
                     "--noise-scale", "0.25", "--noise-scale", "1", "--out", str(out)]) == 0
    _, rows = read_csv(out / "summary.csv")
    assert [r[0] for r in rows] == ["0.25", "1.0"]
    _, runs = read_csv(out / "runs.csv")
    assert len(runs) == 4


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--trials", "3"]) == 0
    out = capsys.readouterr().out
    for term in costs.TERMS:
        assert f"cost_{term}" in out


def test_gradcheck_detects_broken_gradient(monkeypatch, capsys):
    good = costs.KERNELS["dynamic"]

    def bad(*args, **kwargs):
        val, gp, gv, ga, dt = good(*args, **kwargs)
        return val, None if gp is None else -gp, gv, ga, dt

    monkeypatch.setitem(costs.KERNELS, "dynamic", bad)
    assert cli.main(["gradcheck", "--trials", "3"]) != 0
    err = capsys.readouterr().err
    assert "cost_dynamic" in err
