import json
import subprocess
import sys

import pytest

from reluextract.cli import main
from reluextract.extraction import CandidateSet, ExtractionParams, schedule
from reluextract.harness import ExperimentConfig, TargetSpec, bump_network
from reluextract.network import load_network


def knobs(k, d, r=0.02, tau=20.0):
    p = ExtractionParams(epsilon=0.05, delta=0.1, k=k, R=2.0, B=2.0)
    s = schedule(p, d)
    return p.c_r * r / s.r, p.c_tau * tau / s.tau


@pytest.fixture
def target(tmp_path):
    path = tmp_path / "t.json"
    assert main(["gen", "--kind", "random-separated", "--d", "3", "--k", "2", "--R", "2",
                 "--B", "2", "--seed", "1", "--out", str(path)]) == 0
    return path


@pytest.fixture
def config(tmp_path):
    c_r, c_tau = knobs(2, 3)
    cfg = ExperimentConfig(target=TargetSpec(kind="random-separated", d=3, k=2, seed=1),
                           extraction={"epsilon": 0.05, "delta": 0.1, "c_r": c_r, "c_tau": c_tau},
                           mc_samples=5000, out_dir=str(tmp_path / "runs"))
    path = tmp_path / "cfg.json"
    cfg.dump(path)
    return path


def learner_args(oracle, k=2, d=3):
    c_r, c_tau = knobs(k, d)
    return ["--oracle", oracle, "--epsilon", "0.05", "--delta", "0.1", "--k", str(k),
            "--R", "2", "--B", "2", "--knob", f"c_r={c_r!r}", "--knob", f"c_tau={c_tau!r}"]


class TestGen:
    def test_bump(self, tmp_path):
        path = tmp_path / "b.json"
        assert main(["gen", "--kind", "bump", "--param", "a=0.5", "--param", "delta_bump=0.25",
                     "--out", str(path)]) == 0
        assert load_network(path) == bump_network(0.5, 0.25)

    def test_random(self, target):
        net = load_network(target)
        assert (net.dim, net.k) == (3, 2)

    def test_bad_kind(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as info:
            main(["gen", "--kind", "spiral", "--out", str(tmp_path / "x")])
        assert info.value.code == 1

    def test_bad_param(self, tmp_path, capsys):
        assert main(["gen", "--kind", "bump", "--param", "a", "--out", str(tmp_path / "x")]) == 1
        assert "NAME=VALUE" in capsys.readouterr().err


class TestLearner:
    def test_extract(self, target, tmp_path, capsys):
        out = tmp_path / "c.json"
        assert main(["extract", *learner_args(f"file:{target}"), "--out", str(out)]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["queries"] == rep["m"] * 6
        cands = CandidateSet.from_dict(json.loads(out.read_text()))
        net = load_network(target)
        assert all(cands.contains(w, b) for w, b in zip(net.weights, net.biases))

    def test_learn_and_evaluate(self, target, tmp_path, capsys):
        model = tmp_path / "m.json"
        assert main(["learn", *learner_args(f"file:{target}"), "--n", "200",
                     "--out", str(model), "--report", str(tmp_path / "r.json")]) == 0
        rep = json.loads((tmp_path / "r.json").read_text())
        assert rep["n_samples"] == 200
        capsys.readouterr()
        args = ["evaluate", "--model", str(target), "--model", str(model), "--samples", "5000"]
        assert main(args) == 0
        loss = float(capsys.readouterr().out.split()[0])
        assert loss <= 1e-10
        assert main(args + ["--threshold", "-1"]) == 2

    def test_budget_is_stage_error(self, target, tmp_path, capsys):
        args = ["learn", *learner_args(f"file:{target}"), "--budget", "10",
                "--out", str(tmp_path / "m.json")]
        assert main(args) == 3
        assert "get_neurons" in capsys.readouterr().err

    def test_bad_oracle(self, tmp_path):
        assert main(["extract", *learner_args("ftp:nowhere"), "--out", str(tmp_path / "c")]) == 1

    def test_missing_required(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["extract", "--oracle", "file:x"])
        assert info.value.code == 1

    def test_evaluate_needs_two(self, target):
        assert main(["evaluate", "--model", str(target)]) == 1


class TestRun:
    def test_run_ok(self, config, tmp_path, capsys):
        assert main(["run", "--config", str(config)]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["status"] == "ok" and rep["passed"]
        assert len(list((tmp_path / "runs").glob("*.reports.jsonl"))) == 1

    def test_threshold_exit(self, config, capsys):
        assert main(["run", "--config", str(config), "--set", "threshold=-1"]) == 2

    def test_stage_exit(self, config, capsys):
        assert main(["run", "--config", str(config), "--set", "budget=50"]) == 3
        assert json.loads(capsys.readouterr().out)["error_stage"] == "get_neurons"

    def test_bad_set(self, config, capsys):
        assert main(["run", "--config", str(config), "--set", "nonsense.field=1"]) == 1

    def test_sweep_and_report(self, config, tmp_path, capsys):
        tau = json.loads(config.read_text())["extraction"]["c_tau"]
        values = f"{tau!r},{tau / 2!r}"
        assert main(["sweep", "--config", str(config), "--knob", "c_tau", "--values", values]) == 0
        table = capsys.readouterr().out.splitlines()
        assert table[0].startswith("c_tau,") and len(table) == 3
        assert main(["report", str(tmp_path / "runs")]) == 0
        rows = capsys.readouterr().out.splitlines()
        assert len(rows) == 3


class TestServe:
    def test_subprocess_server(self, target, tmp_path):
        proc = subprocess.Popen([sys.executable, "-m", "reluextract.cli", "serve", "--model",
                                 str(target)], stdout=subprocess.PIPE, text=True)
        try:
            line = proc.stdout.readline()
            assert line.startswith("serving on ")
            addr = line.split()[-1]
            out = tmp_path / "c.json"
            assert main(["extract", *learner_args(f"tcp:{addr}"), "--out", str(out),
                         "--report", str(tmp_path / "r.json")]) == 0
            local = tmp_path / "c2.json"
            assert main(["extract", *learner_args(f"file:{target}"), "--out", str(local),
                         "--report", str(tmp_path / "r2.json")]) == 0
            assert out.read_bytes() == local.read_bytes()
        finally:
            proc.terminate()
            proc.wait(10)
