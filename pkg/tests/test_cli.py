import json
import pytest
import sciris as sc
import reprise as rp

SMALL = """
stream.num_tasks = 2
stream.classes_per_task = 2
stream.samples_per_class_train = 10
stream.samples_per_class_test = 5
stream.input_dim = 4
model.hidden = 8
rehearsal.k = 2
rehearsal.incoming_batch_size = 5
rehearsal.memory_batch_size = 5
rehearsal.memory_capacity = 10
"""


@pytest.fixture
def config_file(tmp_path, monkeypatch):
    monkeypatch.delenv("OCL_SEED", raising=False)
    path = tmp_path / "small.cfg"
    sc.savetext(path, SMALL)
    return str(path)


def test_usage_errors(capsys):
    assert rp.cli.main([]) == rp.cli.EXIT_USAGE
    assert rp.cli.main(["verify", "prop9"]) == rp.cli.EXIT_USAGE
    assert rp.cli.main(["sweep", "--k", "one"]) == rp.cli.EXIT_USAGE
    assert rp.cli.main(["--version"]) == rp.cli.EXIT_OK
    assert rp.__version__ in capsys.readouterr().out


def test_config_errors(config_file, tmp_path):
    assert rp.cli.main(["run", str(tmp_path / "missing.cfg"), "--quiet"]) == rp.cli.EXIT_USAGE
    assert rp.cli.main(["run", config_file, "--set", "rehearsal.k=0", "--quiet"]) == rp.cli.EXIT_USAGE
    assert rp.cli.main(["run", config_file, "--set", "no_such.key=1", "--quiet"]) == rp.cli.EXIT_USAGE


def test_internal_error(tmp_path):
    assert rp.cli.main(["trace", str(tmp_path / "missing.csv")]) == rp.cli.EXIT_INTERNAL


def test_verify_prints_report(capsys, tmp_path):
    path = tmp_path / "report.json"
    assert rp.cli.main(["verify", "metrics", "--json", str(path)]) == rp.cli.EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["kind"] == "metrics" and report["status"] == "pass"
    assert sc.loadjson(path)["passed"] is True

    assert rp.cli.main(["verify", "prop2", "--trials", "500", "--dt", "4", "--dm", "2"]) == rp.cli.EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["details"]["predicted_weight"] == pytest.approx(2.0)


def test_verify_failure_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    sc.savejson(bad, [dict(name="wrong", matrix=[[0.9]], expected=dict(A_T=0.1))])
    assert rp.cli.main(["verify", "metrics", "--fixtures", str(bad)]) == rp.cli.EXIT_FAIL


def test_run_and_trace(config_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert rp.cli.main(["run", config_file, "--set", "seed=7", "--out", str(out), "--quiet"]) == rp.cli.EXIT_OK
    assert sc.loadjson(out / "manifest.json")["seed"] == 7
    capsys.readouterr()
    assert rp.cli.main(["trace", str(out / "trace.csv")]) == rp.cli.EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split()[0] == "task"
    assert len(lines) == 3


def test_seed_from_environment(config_file, tmp_path, monkeypatch):
    monkeypatch.setenv("OCL_SEED", "11")
    out = tmp_path / "run"
    assert rp.cli.main(["run", config_file, "--set", "seed=7", "--out", str(out), "--quiet"]) == rp.cli.EXIT_OK
    assert sc.loadjson(out / "manifest.json")["seed"] == 11


def test_sweep(config_file, tmp_path, capsys):
    out = tmp_path / "sweep"
    args = ["sweep", config_file, "--k", "1,2", "--aug", "1:14", "--validation-tasks", "1", "--out", str(out), "--quiet"]
    assert rp.cli.main(args) == rp.cli.EXIT_OK
    assert len(rp.read_csv(out / "sweep.csv")) == 2
    assert len(capsys.readouterr().out.strip().splitlines()) == 2


def test_landscape(config_file, tmp_path):
    out = tmp_path / "landscape"
    args = ["landscape", config_file, "--resolution", "3", "--task1-epochs", "1", "--out", str(out), "--quiet"]
    assert rp.cli.main(args) == rp.cli.EXIT_OK
    assert len(rp.read_csv(out / "grid.csv")) == 9
