import json
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from regmix.cli import main, template

WALL = re.compile(r'"wall_time_s": [0-9.eE+-]+')


def strip_wall(text: str) -> str:
    return WALL.sub('"wall_time_s": 0', text)


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture
def normal_csv(tmp_path, capsys):
    out = tmp_path / "normal.csv"
    code, _, err = run_cli(capsys, "simulate", "--model", "template:model-normal-quadratic", "--n", 300, "--seed", 1, "--out", out)
    assert code == 0, err
    return out


@pytest.fixture
def nb_csv(tmp_path, capsys):
    out = tmp_path / "nb.csv"
    code, _, err = run_cli(capsys, "simulate", "--model", "template:model-nb-pathological", "--n", 200, "--seed", 2, "--out", out)
    assert code == 0, err
    return out


def test_simulate_writes_meta_comment_and_is_deterministic(tmp_path, capsys, normal_csv):
    again = tmp_path / "again.csv"
    run_cli(capsys, "simulate", "--model", "template:model-normal-quadratic", "--n", 300, "--seed", 1, "--out", again)
    first = normal_csv.read_text()
    assert first.startswith("# meta ")
    meta = json.loads(first.splitlines()[0][len("# meta "):])
    assert meta["seed"] == 1 and meta["command"] == "simulate"
    assert first.splitlines()[1] == "x1,y"
    assert strip_wall(first) == strip_wall(again.read_text())


def test_simulate_different_seed_differs(tmp_path, capsys, normal_csv):
    other = tmp_path / "other.csv"
    run_cli(capsys, "simulate", "--model", "template:model-normal-quadratic", "--n", 300, "--seed", 2, "--out", other)
    assert strip_wall(normal_csv.read_text()) != strip_wall(other.read_text())


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "--model", "template:model-normal-quadratic", "--n", "10"],
        ["fit-em", "--model", "template:model-normal-quadratic", "--k", "2"],
        ["fit-bayes", "--model", "template:model-nb-pathological", "--k", "2"],
    ],
)
def test_missing_seed_is_validation_error(tmp_path, capsys, normal_csv, argv):
    argv = argv + ["--out", str(tmp_path / "o")]
    if argv[0] != "simulate":
        argv += ["--data", str(normal_csv)]
    code, _, err = run_cli(capsys, *argv)
    assert code == 1
    assert json.loads(err)["error"] == "seed_required"


def test_missing_parameter(tmp_path, capsys):
    code, _, err = run_cli(capsys, "simulate", "--model", "template:model-normal-quadratic", "--seed", 1, "--out", tmp_path / "x.csv")
    assert code == 1
    assert json.loads(err)["error"] == "missing_parameter"


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["wasserstein", "--a", "x"]])
def test_usage_errors_exit_one(capsys, argv):
    code, _, err = run_cli(capsys, *argv)
    assert code == 1
    assert "error" in json.loads(err)


def test_unknown_template(capsys, tmp_path):
    code, _, err = run_cli(capsys, "simulate", "--model", "template:nope", "--n", 5, "--seed", 1, "--out", tmp_path / "o.csv")
    assert code == 1
    assert json.loads(err)["error"] == "unknown_template"


def test_fit_em_deterministic(tmp_path, capsys, normal_csv):
    outs = []
    for i in range(2):
        out = tmp_path / f"fit{i}.json"
        code, _, err = run_cli(capsys, "fit-em", "--data", normal_csv, "--model", "template:model-normal-quadratic",
                               "--k", 2, "--restarts", 2, "--seed", 5, "--out", out)
        assert code == 0, err
        outs.append(strip_wall(out.read_text()))
    assert outs[0] == outs[1]
    body = json.loads(outs[0])
    assert body["meta"]["seed"] == 5
    trace = body["result"]["loglik_trace"]
    assert np.all(np.diff(trace) >= -1e-9)


def test_fit_bayes_deterministic_jsonl(tmp_path, capsys, nb_csv):
    outs = []
    for i in range(2):
        out = tmp_path / f"chain{i}.jsonl"
        code, _, err = run_cli(capsys, "fit-bayes", "--data", nb_csv, "--model", "template:model-nb-pathological",
                               "--k", 2, "--iters", 40, "--burnin", 10, "--seed", 3, "--out", out)
        assert code == 0, err
        outs.append(strip_wall(out.read_text()))
    assert outs[0] == outs[1]
    lines = outs[0].splitlines()
    assert len(lines) == 31
    assert "meta" in json.loads(lines[0]) and "summary" in json.loads(lines[0])


def test_wasserstein_prints_distance(tmp_path, capsys):
    a = write_json(tmp_path / "a.json", {"atoms": [{"weight": 0.5, "theta1": [0.3]}, {"weight": 0.5, "theta1": [0.7]}]})
    b = write_json(tmp_path / "b.json", {"atoms": [{"weight": 0.5, "theta1": [0.2]}, {"weight": 0.5, "theta1": [0.8]}]})
    code, out, _ = run_cli(capsys, "wasserstein", "--a", a, "--b", b)
    assert code == 0
    assert float(out) == pytest.approx(0.1, abs=1e-15)


def test_wasserstein_reads_measure_block_of_model(tmp_path, capsys):
    model = template("model-normal-quadratic")
    bare = write_json(tmp_path / "g.json", model["measure"])
    code, out, _ = run_cli(capsys, "wasserstein", "--a", bare, "--b", "template:model-normal-quadratic")
    assert code == 0
    assert float(out) == 0.0


def test_wasserstein_invalid_measure(tmp_path, capsys):
    a = write_json(tmp_path / "a.json", {"atoms": [{"weight": 0.7, "theta1": [0.3]}]})
    code, _, err = run_cli(capsys, "wasserstein", "--a", a, "--b", a)
    assert code == 1


def test_distance_deterministic(tmp_path, capsys):
    model = template("model-logistic")
    other = json.loads(json.dumps(model))
    other["measure"]["atoms"][1]["theta1"] = [4.0]
    a = write_json(tmp_path / "a.json", model)
    b = write_json(tmp_path / "b.json", other)
    vals = []
    for i in range(2):
        out = tmp_path / f"d{i}.json"
        code, _, err = run_cli(capsys, "distance", "--a", a, "--b", b, "--mc-points", 100, "--seed", 4, "--out", out)
        assert code == 0, err
        vals.append(strip_wall(out.read_text()))
    assert vals[0] == vals[1]
    assert json.loads(vals[0])["value"] > 0


def test_check_identifiability_outputs(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "check-identifiability", "--model", "template:model-nb-pathological", "--order", 1)
    assert code == 0
    assert json.loads(out)["rule_fired"] == "nb_pathology"
    report = tmp_path / "rep.json"
    code, out, _ = run_cli(capsys, "check-identifiability", "--model", "template:model-logistic", "--order", 1,
                           "--x-grid=-6:6:51", "--report", report)
    assert code == 0
    assert json.loads(out)["order_claimed"] == 1
    assert json.loads(report.read_text())["report"]["order_claimed"] == 1


def test_bad_grid_string(capsys):
    code, _, err = run_cli(capsys, "check-identifiability", "--model", "template:model-logistic", "--x-grid", "1:2")
    assert code == 1


def test_experiment_deterministic(tmp_path, capsys):
    spec = template("experiment-rate-exact")
    spec.update({"n_grid": [100, 200, 400], "replicates": 2})
    spec.setdefault("options", {}).update({"restarts": 2, "max_iter": 100})
    path = write_json(tmp_path / "spec.json", spec)
    texts = []
    for i in range(2):
        out = tmp_path / f"exp{i}"
        code, _, err = run_cli(capsys, "experiment", "--spec", path, "--out", out, "--seed", 9, "--workers", 1)
        assert code == 0, err
        texts.append({f: strip_wall((out / f).read_text()) for f in ("records.csv", "summary.json", "meta.json")})
    assert texts[0] == texts[1]
    assert texts[0]["records.csv"].startswith("# meta ")
    assert json.loads(texts[0]["summary.json"])["meta"]["seed"] == 9


def test_experiment_invalid_spec(tmp_path, capsys):
    path = write_json(tmp_path / "spec.json", {"variant": "rate_curve", "n_grid": [5, 1]})
    code, _, err = run_cli(capsys, "experiment", "--spec", path, "--out", tmp_path / "o", "--seed", 1)
    assert code == 1
    assert json.loads(err)["error"] == "invalid_spec"


def test_runtime_failure_exit_two(tmp_path, capsys):
    # counts outside the Bernoulli support cannot be fitted by the binomial template
    data = tmp_path / "counts.csv"
    data.write_text("x1,y\n0.1,3\n0.2,5\n")
    code, _, err = run_cli(capsys, "fit-em", "--data", data, "--model", "template:model-binomial", "--k", 2,
                           "--strategy", "em1", "--seed", 1, "--out", tmp_path / "o.json")
    assert code == 2
    assert json.loads(err)["error"] == "runtime_failure"


def test_missing_data_file_exit_one(tmp_path, capsys):
    code, _, err = run_cli(capsys, "fit-em", "--data", tmp_path / "missing.csv", "--model", "template:model-normal-quadratic",
                           "--k", 2, "--seed", 1, "--out", tmp_path / "o.json")
    assert code == 1
    assert json.loads(err)["error"] == "file_not_found"


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "regmix.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("simulate", "fit-em", "fit-bayes", "wasserstein", "distance", "check-identifiability", "experiment"):
        assert cmd in res.stdout


@pytest.mark.parametrize("name", ["fit-em", "fit-bayes", "simulate", "distance", "check-identifiability",
                                  "model-crash", "experiment-subsample", "experiment-inverse-binomial"])
def test_templates_are_json(name):
    assert isinstance(template(name), dict)
    json.dumps(template(name))
