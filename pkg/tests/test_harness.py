import json

import numpy as np
import pytest

from reluextract.errors import InputError
from reluextract.extraction import ExtractionParams, schedule
from reluextract.geometry import ClosenessParams, is_close, sin_angle
from reluextract.harness import (ExperimentConfig, RunReport, TargetSpec, bump_network,
                                 generate_target, read_reports, report_table, run_experiment,
                                 separated_ok, sweep)
from reluextract.network import Network, evaluate, l2_distance_mc, save_network


def quick_config(**kw):
    p = ExtractionParams(epsilon=0.05, delta=0.1, k=2, R=2.0, B=2.0)
    s = schedule(p, 3)
    doc = dict(target=TargetSpec(kind="random-separated", d=3, k=2, seed=1),
               extraction={"epsilon": 0.05, "delta": 0.1, "c_r": p.c_r * 0.02 / s.r,
                           "c_tau": p.c_tau * 20 / s.tau},
               mc_samples=20_000)
    doc.update(kw)
    return ExperimentConfig(**doc)


class TestTargets:
    def test_bump_example(self):
        net = generate_target("bump", d=1, a=0.0, delta_bump=1.0)
        np.testing.assert_array_equal(net.weights.ravel(), [1.0, 1.0, 2.0])
        np.testing.assert_array_equal(net.biases, [0.0, 1.0, 1.0])
        np.testing.assert_array_equal(net.coefs, [1.0, 1.0, -1.0])
        xs = np.linspace(-1, 2, 31)
        tent = np.clip(np.minimum(xs, 1 - xs), 0, None)
        np.testing.assert_allclose(net(xs[:, None]), tent, atol=1e-15)

    def test_bump_shifted(self):
        net = bump_network(2.0, 0.5)
        assert evaluate(net, [2.25]) == pytest.approx(0.25)
        assert evaluate(net, [1.9]) == 0.0 and evaluate(net, [2.6]) == 0.0

    def test_separated_predicate(self):
        for seed in range(10):
            net = generate_target("random-separated", 8, 4, 2.0, 2.0, seed)
            assert net.k == 4
            assert separated_ok(net.weights, 0.2)
            for i in range(4):
                for j in range(i + 1, 4):
                    assert sin_angle(net.weights[i], net.weights[j]) >= 0.2
            assert np.all(np.linalg.norm(net.weights, axis=1) <= 2.0)
            assert np.all(np.abs(net.biases) <= 2.0)

    def test_separated_impossible(self):
        with pytest.raises(InputError):
            generate_target("random-separated", 1, 2, 1.0, 1.0, 0)

    def test_clumped_clusters_are_close(self):
        net = generate_target("random-clumped", 5, 6, 2.0, 2.0, 3, n_clusters=2,
                              clump_delta=1e-2, clump_alpha=1e-2)
        assert net.k == 6
        p = ClosenessParams(2e-2, 4e-2)
        for block in (range(0, 3), range(3, 6)):
            for i in block:
                for j in block:
                    if i < j:
                        assert is_close((net.weights[i], net.biases[i]),
                                        (net.weights[j], net.biases[j]), p)

    def test_cancelling_pair_is_zero(self):
        net = generate_target("cancelling-pair", 4, 4, 2.0, 2.0, 0)
        assert net.k == 4
        assert l2_distance_mc(net, Network.zero(4), 10_000, seed=0)[0] == 0.0

    def test_file(self, tmp_path):
        net = bump_network(0.0, 1.0)
        save_network(net, tmp_path / "t.json")
        assert generate_target("file", path=tmp_path / "t.json") == net

    def test_bad(self):
        with pytest.raises(InputError):
            generate_target("nope", 2, 2, 1.0, 1.0)
        with pytest.raises(InputError):
            generate_target("random-separated", 2, 2, -1.0, 1.0)

    def test_reproducible(self):
        a = generate_target("random-clumped", 4, 4, 1.0, 1.0, 7)
        b = generate_target("random-clumped", 4, 4, 1.0, 1.0, 7)
        assert a == b


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = quick_config()
        cfg.dump(tmp_path / "c.json")
        back = ExperimentConfig.load(tmp_path / "c.json")
        assert back.to_dict() == cfg.to_dict()
        assert back.config_hash() == cfg.config_hash()

    def test_override(self):
        cfg = quick_config()
        c2 = cfg.override("extraction.epsilon", 0.1).override("target.seed", 5)
        assert c2.extraction["epsilon"] == 0.1 and c2.target.seed == 5
        assert cfg.extraction["epsilon"] == 0.05
        assert c2.config_hash() != cfg.config_hash()
        with pytest.raises(InputError):
            cfg.override("seed.x", 1)

    def test_hash_ignores_output_path(self):
        cfg = quick_config()
        assert cfg.override("out_dir", "/tmp/x").config_hash() == cfg.config_hash()

    def test_unknown_field(self):
        with pytest.raises(InputError):
            ExperimentConfig.from_dict({"targett": {}})

    def test_bad_oracle(self):
        with pytest.raises(InputError):
            quick_config(oracle="carrier-pigeon")

    def test_params_inherit_target_bounds(self):
        p = quick_config().extraction_params()
        assert (p.k, p.R, p.B) == (2, 2.0, 2.0)


class TestRun:
    def test_end_to_end(self, tmp_path):
        cfg = quick_config(out_dir=str(tmp_path))
        rep, model, cands = run_experiment(cfg)
        assert rep.status == "ok" and rep.passed
        assert rep.mc_loss <= 1e-10 and rep.mc_stderr >= 0
        assert rep.mc_samples == 20_000 and rep.n_holdout == rep.n_train
        assert max(rep.recovery_errors) <= 1e-6
        assert rep.knobs["c_r"] == cfg.extraction["c_r"]
        stem = tmp_path / rep.config_hash
        assert (tmp_path / f"{rep.config_hash}.model.json").exists()
        assert (tmp_path / f"{rep.config_hash}.candidates.json").exists()
        lines = (tmp_path / f"{rep.config_hash}.reports.jsonl").read_text().splitlines()
        assert len(lines) == 1
        run_experiment(cfg)
        assert len(read_reports(tmp_path)) == 2
        assert json.loads(stem.with_suffix(".config.json").read_text()) == cfg.to_dict()

    def test_reproducible(self):
        cfg = quick_config()
        a, _, _ = run_experiment(cfg)
        b, _, _ = run_experiment(cfg)
        assert a.without_times() == b.without_times()

    def test_wire_matches_in_process(self):
        cfg = quick_config()
        a, ma, ca = run_experiment(cfg)
        b, mb, cb = run_experiment(cfg.override("oracle", "wire"))
        da, db = a.without_times(), b.without_times()
        assert da.pop("config_hash") != db.pop("config_hash")
        assert da == db
        assert json.dumps(ca.to_dict()) == json.dumps(cb.to_dict())
        assert json.dumps(ma.to_dict()) == json.dumps(mb.to_dict())

    def test_stage_error_recorded(self, tmp_path):
        cfg = quick_config(budget=50, out_dir=str(tmp_path))
        rep, model, cands = run_experiment(cfg)
        assert rep.status == "stage-error" and rep.error_stage == "get_neurons"
        assert rep.passed is False and model is None
        back = read_reports(tmp_path)[0]
        assert back.error_stage == "get_neurons"

    def test_partial_artifacts_kept(self, tmp_path):
        cfg = quick_config(out_dir=str(tmp_path))
        m = schedule(cfg.extraction_params(), 3).m
        # the harvest uses the whole budget; nothing is left to regress on
        rep, model, cands = run_experiment(cfg.override("budget", m * 6))
        assert rep.error_stage == "draw_dataset"
        assert cands is not None and "candidates" in rep.artifacts

    def test_regression_capped_by_budget(self, tmp_path):
        cfg = quick_config()
        m = schedule(cfg.extraction_params(), 3).m
        rep, _, _ = run_experiment(cfg.override("budget", m * 6 + 5))
        assert rep.status == "ok" and rep.n_train == 5

    def test_threshold(self):
        rep, _, _ = run_experiment(quick_config(threshold=-1.0))
        assert rep.status == "ok" and rep.passed is False


class TestSweep:
    def test_table(self):
        cfg = quick_config()
        base = cfg.extraction["c_tau"]
        reps = sweep(cfg, "c_tau", [base, base / 2])
        assert len(reps) == 2
        assert reps[0].m > reps[1].m
        table = report_table(reps, "c_tau", [base, base / 2]).splitlines()
        assert table[0].startswith("c_tau,config_hash,status")
        assert len(table) == 3

    def test_report_round_trip(self):
        rep = RunReport("abc", "ok", True, 0.1, 10, mc_loss=0.01, mc_stderr=0.001)
        assert RunReport.from_dict(json.loads(json.dumps(rep.to_dict()))) == rep
