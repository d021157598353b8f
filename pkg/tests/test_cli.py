import csv
import hashlib
import json
import subprocess
import sys

import pytest

from poltwin.cli import EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """generate -> prepare -> train both heads, small enough to run in seconds."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--runs", "40", "--traj-runs", "3", "--seed", "0",
                 "--out", str(root / "abm")]) == EXIT_OK
    assert main(["prepare", "--transitions", str(root / "abm" / "transitions.csv"),
                 "--target-n", "3000", "--seed", "0", "--out", str(root / "data")]) == EXIT_OK
    for model in ("mlp", "mdn"):
        assert main(["train", "--model", model, "--data", str(root / "data"), "--seed", "0",
                     "--epochs", "5", "--out", str(root / "models")]) == EXIT_OK
    return root


# -- usage and validation errors ------------------------------------------------

@pytest.mark.parametrize("argv", [
    ["generate", "--runs", "0", "--out", "x"],
    ["generate", "--out", "x", "--bogus"],
    ["train", "--model", "gru", "--data", "d", "--out", "x"],
    [],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_missing_transitions_is_validation_error(tmp_path, capsys):
    code = main(["prepare", "--transitions", str(tmp_path / "nope.csv"), "--out", str(tmp_path)])
    assert code == EXIT_VALIDATION
    assert "nope.csv" in capsys.readouterr().err


def test_evaluate_without_models(workdir, tmp_path):
    code = main(["evaluate", "--models", str(tmp_path / "empty"), "--data", str(workdir / "data"),
                 "--out", str(tmp_path)])
    assert code == EXIT_VALIDATION


def test_malformed_transitions_header(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,c\n1,2,3\n")
    assert main(["prepare", "--transitions", str(bad), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION


# -- generate and prepare -----------------------------------------------------------

def test_generate_outputs(workdir):
    trans = _rows(workdir / "abm" / "transitions.csv")
    traj = _rows(workdir / "abm" / "trajectories.csv")
    assert trans and traj
    assert {r["run_id"] for r in traj} == {"0", "1", "2"}
    assert len({r["run_id"] for r in trans}) == 40


def test_generate_is_reproducible(tmp_path):
    for tag in ("a", "b"):
        assert main(["generate", "--runs", "3", "--traj-runs", "2", "--seed", "7", "--out", str(tmp_path / tag)]) == 0
    for name in ("transitions.csv", "trajectories.csv"):
        assert _digest(tmp_path / "a" / name) == _digest(tmp_path / "b" / name)


def test_prepare_split_sizes(workdir):
    sizes = {n: len(_rows(workdir / "data" / f"{n}.csv")) for n in ("train", "val", "test")}
    assert sum(sizes.values()) == 3000
    assert sizes == {"train": 2100, "val": 450, "test": 450}
    scaler = json.loads((workdir / "data" / "scaler.json").read_text())
    assert scaler
    corr = _rows(workdir / "data" / "correlation.csv")
    assert len(corr) == len(corr[0]) - 1


def test_prepare_warns_on_replacement(workdir, tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "poltwin.cli", "prepare",
         "--transitions", str(workdir / "abm" / "transitions.csv"),
         "--target-n", "60000", "--out", str(tmp_path)],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert "replacement" in proc.stderr


# -- train, evaluate, simulate, compare ---------------------------------------------------

def test_train_outputs(workdir):
    for model in ("mlp", "mdn"):
        doc = json.loads((workdir / "models" / f"{model}.json").read_text())
        assert "scaler" in json.dumps(doc)
        hist = _rows(workdir / "models" / f"{model}_history.csv")
        assert 1 <= len(hist) <= 5


def test_evaluate_report(workdir, tmp_path, capsys):
    code = main(["evaluate", "--models", str(workdir / "models"), "--data", str(workdir / "data"),
                 "--grad-check", "--out", str(tmp_path)])
    assert code == EXIT_OK
    report = json.loads((tmp_path / "report.json").read_text())
    nd, sd = report["next_destination"], report["stay_duration"]
    for key in ("f1", "accuracy"):
        assert 0 <= nd["mlp"][key] <= 1
    assert sd["mdn_wasserstein"] >= 0 and sd["weibull_baseline_wasserstein"] >= 0
    assert report["grad_check"]["mlp_max_rel_error"] < 1e-4
    assert report["grad_check"]["mdn_max_rel_error"] < 1e-4
    assert "grad-check" in capsys.readouterr().out


@pytest.fixture(scope="module")
def scenarios(workdir):
    for mode in ("normal", "emergency"):
        assert main(["simulate", "--mode", mode, "--models", str(workdir / "models"), "--runs", "2",
                     "--seed", "0", "--out", str(workdir / mode)]) == EXIT_OK
    return workdir


def test_simulate_event_logs(scenarios):
    normal = _rows(scenarios / "normal" / "events.csv")
    emergency = _rows(scenarios / "emergency" / "events.csv")
    assert normal and not any(r["emergency_branch"] for r in normal)
    assert any(r["emergency_branch"] for r in emergency)
    assert all(int(r["minute"]) >= 780 for r in emergency if r["emergency_branch"])


def test_simulate_is_reproducible(workdir, tmp_path):
    for tag in ("a", "b"):
        assert main(["simulate", "--mode", "emergency", "--models", str(workdir / "models"),
                     "--seed", "4", "--out", str(tmp_path / tag)]) == EXIT_OK
    for name in ("trajectories.csv", "transitions.csv", "events.csv"):
        assert _digest(tmp_path / "a" / name) == _digest(tmp_path / "b" / name)


def test_compare_abm_against_itself(scenarios, tmp_path):
    abm = scenarios / "abm"
    code = main(["compare", "--abm", str(abm), "--scenario", f"self={abm}",
                 "--scenario", f"normal={scenarios / 'normal'}",
                 "--scenario", f"emergency={scenarios / 'emergency'}", "--out", str(tmp_path)])
    assert code == EXIT_OK
    for r in _rows(tmp_path / "fig8_mse.csv"):
        if r["scenario"] == "self":
            assert float(r["sq_err"]) == 0.0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary["mse"]) == {"self", "normal", "emergency"}
    assert all(v in (0.0, None) for v in summary["mse"]["self"].values())
    assert all(v in (0.0, None) for v in summary["work_duration_wasserstein_s"]["self"].values())
    sources = {r["source"] for r in _rows(tmp_path / "fig5_work_durations.csv")}
    assert sources == {"abm", "self", "normal", "emergency"}


def test_compare_rejects_mismatched_bounds(scenarios, tmp_path):
    src = scenarios / "normal"
    dst = tmp_path / "shifted"
    dst.mkdir()
    (dst / "transitions.csv").write_bytes((src / "transitions.csv").read_bytes())
    rows = _rows(src / "trajectories.csv")
    with open(dst / "trajectories.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            r["x"] = repr(float(r["x"]) * 2 + 5)
            w.writerow(r)
    code = main(["compare", "--abm", str(scenarios / "abm"), "--scenario", f"bad={dst}",
                 "--out", str(tmp_path / "o")])
    assert code == EXIT_VALIDATION
