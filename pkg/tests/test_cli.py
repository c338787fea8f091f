import csv
import json

import numpy as np
import pytest
import yaml

from curvetrack import cli
from curvetrack.curves import load_csv, save_csv
from curvetrack.program import parse_program, print_program
from conftest import line_curve


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def small_config(tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"de": {"population": 6, "generations": 2}}))
    return cfg


@pytest.fixture(scope="module")
def placed_line_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("line")
    save_csv(line_curve(), d / "line.csv")
    assert cli.main(["--out-dir", str(d), "resolve", "--baseline", "--curve", str(d / "line.csv")]) == 0
    return d


def test_dry_run_prints_plan(capsys, tmp_path):
    assert run("--out-dir", tmp_path, "pipeline", "--dry-run") == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "1. load robot model" in out and "6. report" in out
    assert not any(tmp_path.iterdir())


def test_missing_model_fails_before_compute(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("robot_model: /nonexistent/robot.yaml\n")
    assert run("--config", cfg, "--out-dir", tmp_path / "o", "pipeline") == cli.EXIT_USAGE
    assert "robot model not found" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("text,msg", [
    ("de: [1, 2\n", "malformed config"),
    ("fit:\n  treshold_mm: 0.3\n", "unknown key"),
    ("fit:\n  threshold_mm: -1\n", "positive"),
    ("fit: 3\n", "expected a mapping"),
])
def test_bad_config_is_usage_error(tmp_path, capsys, text, msg):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(text)
    assert run("--config", cfg, "pipeline", "--dry-run") == cli.EXIT_USAGE
    assert msg in capsys.readouterr().err


def test_curve_gen_and_load_round_trip(tmp_path):
    assert run("curve", "--gen", "curve1", "-o", tmp_path / "c.csv") == 0
    c = load_csv(tmp_path / "c.csv")
    assert np.allclose(np.linalg.norm(c.n, axis=1), 1.0, atol=1e-12)
    assert run("curve", "--load", tmp_path / "c.csv", "-o", tmp_path / "d.csv") == 0
    d = load_csv(tmp_path / "d.csv")
    assert np.abs(c.p - d.p).max() < 1e-9 and np.abs(c.n - d.n).max() < 1e-9


def test_curve_gen_params(tmp_path):
    assert run("curve", "--gen", "curve1", "--param", "samples=101", "-o", tmp_path / "c.csv") == 0
    assert len(load_csv(tmp_path / "c.csv")) == 101


def test_curve_load_malformed_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x_mm,y_mm,z_mm,nx,ny,nz\n0,0,0,0,0,1\n1,0,zero,0,0,1\n")
    assert run("curve", "--load", bad) == cli.EXIT_USAGE
    assert ":3" in capsys.readouterr().err


def test_resolve_baseline_outputs(placed_line_files):
    d = placed_line_files
    doc = yaml.safe_load((d / "pose.yaml").read_text())
    assert doc["method"] == "baseline" and "config_hash" in doc
    q = np.loadtxt(d / "path.csv", delimiter=",", skiprows=1)
    assert q.shape == (401, 6)
    assert json.loads((d / "manifest.json").read_text())["config_hash"] == doc["config_hash"]


def test_resolve_optimize_deterministic(tmp_path, small_config, capsys):
    c = tmp_path / "c.csv"
    run("curve", "--gen", "curve1", "--param", "samples=200", "-o", c)
    for name in ("a", "b"):
        assert run("--config", small_config, "--seed", 5, "--jobs", 1, "--out-dir", tmp_path / name,
                   "resolve", "--optimize", "--curve", c) == 0
    assert (tmp_path / "a" / "pose.yaml").read_text() == (tmp_path / "b" / "pose.yaml").read_text()
    summary = json.loads((tmp_path / "a" / "resolve_summary.json").read_text())
    assert summary["dominates_baseline"]
    assert summary["objective_min_speed_mms"] >= summary["baseline_objective_min_speed_mms"]
    rows = list(csv.reader(open(tmp_path / "a" / "de_log.csv")))
    assert rows[0] == ["gen", "best_obj", "mean_obj", "worst_obj"] and len(rows) == 4


def test_fit_straight_curve_one_line(placed_line_files, tmp_path):
    d = placed_line_files
    assert run("--out-dir", tmp_path, "fit", "--curve", d / "curve_placed.csv", "--path", d / "path.csv",
               "--speed", 300) == 0
    text = (tmp_path / "program.txt").read_text()
    prog = parse_program(text)
    assert len(prog.primitives) == 1 and prog.primitives[0].kind == "MoveL"
    assert text.startswith("# config ")
    assert print_program(prog) == "\n".join(l for l in text.splitlines() if not l.startswith("#")) + "\n"


def test_fit_sweep_monotone(tmp_path, capsys):
    c = tmp_path / "c.csv"
    run("curve", "--gen", "curve1", "-o", c)
    run("--out-dir", tmp_path, "resolve", "--baseline", "--curve", c)
    capsys.readouterr()
    assert run("--out-dir", tmp_path, "fit", "--curve", tmp_path / "curve_placed.csv", "--path",
               tmp_path / "path.csv", "--sweep", 0.2, 0.5, 1.0) == 0
    counts = [int(l.split(":")[1].split()[0]) for l in capsys.readouterr().out.splitlines() if "segments" in l]
    assert len(counts) == 3 and counts[0] >= counts[1] >= counts[2]


def test_fit_path_length_mismatch(placed_line_files, tmp_path):
    d = placed_line_files
    short = tmp_path / "short.csv"
    short.write_text("\n".join((d / "path.csv").read_text().splitlines()[:10]) + "\n")
    assert run("fit", "--curve", d / "curve_placed.csv", "--path", short) == cli.EXIT_USAGE


@pytest.fixture(scope="module")
def line_program(placed_line_files, tmp_path_factory):
    d = placed_line_files
    out = tmp_path_factory.mktemp("prog")
    assert cli.main(["--out-dir", str(out), "fit", "--curve", str(d / "curve_placed.csv"), "--path",
                     str(d / "path.csv"), "--speed", "300"]) == 0
    return out / "program.txt"


def test_execute_report_columns(placed_line_files, line_program, tmp_path, capsys):
    d = placed_line_files
    assert run("--out-dir", tmp_path, "execute", line_program, "--curve", d / "curve_placed.csv") == 0
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert lines[0] == "max_p_err_mm,max_n_err_deg,mean_v_mms,std_v_mms"
    vals = [float(x) for x in lines[1].split(",")]
    assert vals[2] == pytest.approx(300.0, rel=1e-3)
    trace = (tmp_path / "trace.csv").read_text().splitlines()
    assert trace[0] == "t_s,q1,q2,q3,q4,q5,q6"


def test_execute_seeded_noise_reproducible(line_program, tmp_path):
    for name in ("a", "b"):
        assert run("--seed", 7, "--out-dir", tmp_path / name, "execute", line_program, "--noise-sigma", 1e-4) == 0
    assert (tmp_path / "a" / "trace.csv").read_text() == (tmp_path / "b" / "trace.csv").read_text()
    run("--seed", 8, "--out-dir", tmp_path / "c", "execute", line_program, "--noise-sigma", 1e-4)
    assert (tmp_path / "a" / "trace.csv").read_text() != (tmp_path / "c" / "trace.csv").read_text()


def test_execute_sample_rate(line_program, tmp_path):
    assert run("--out-dir", tmp_path, "execute", line_program, "--sample-rate", 100) == 0
    t = np.loadtxt(tmp_path / "trace.csv", delimiter=",", skiprows=1)[:, 0]
    assert np.allclose(np.diff(t), 0.01)


def test_execute_bad_program(tmp_path, capsys):
    p = tmp_path / "p.txt"
    p.write_text("Start 0 0 0 0 0 0\nMoveL 1 2 3 0 0 0 v-5 z0\n")
    assert run("execute", p) == cli.EXIT_USAGE
    assert "speed must be positive" in capsys.readouterr().err


def test_adjust_in_tolerance_unchanged(placed_line_files, line_program, tmp_path):
    d = placed_line_files
    assert run("--out-dir", tmp_path, "adjust", line_program, "--curve", d / "curve_placed.csv") == 0
    before = parse_program(line_program.read_text())
    after = parse_program((tmp_path / "program_adjusted.txt").read_text())
    assert print_program(before) == print_program(after)
    rows = list(csv.reader(open(tmp_path / "adjust_log.csv")))
    assert rows[0] == ["iter", "max_p_err_mm", "max_n_err_deg", "mean_v", "std_v", "mode"] and len(rows) == 2


def test_adjust_returns_best(placed_line_files, tmp_path):
    # a program with one displaced waypoint; the returned iterate is the best logged one
    d = placed_line_files
    assert run("--out-dir", tmp_path, "fit", "--curve", d / "curve_placed.csv", "--path", d / "path.csv",
               "--uniform", "--threshold", 0.01, "--speed", 200) == 0
    prog = parse_program((tmp_path / "program.txt").read_text())
    k = len(prog.primitives) // 2
    prog.primitives[k].target.p[2] += 1.5
    bad = tmp_path / "bad.txt"
    bad.write_text(print_program(prog))
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"adjust": {"max_iters": 3}}))
    run("--config", cfg, "--out-dir", tmp_path / "adj", "adjust", bad, "--curve", d / "curve_placed.csv")
    rows = list(csv.reader(open(tmp_path / "adj" / "adjust_log.csv")))[1:]
    errs = [float(r[1]) for r in rows]
    assert errs[0] > 1.0 and min(errs) < errs[0]
    final = parse_program((tmp_path / "adj" / "program_adjusted.txt").read_text())
    assert [p.kind for p in final.primitives] == [p.kind for p in prog.primitives]
