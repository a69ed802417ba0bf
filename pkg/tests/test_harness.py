import json
import os

import numpy as np
import pytest

from dgcn.cli import main as cli_main
from dgcn.harness import (ExperimentConfig, aggregate_records, report,
                          run_experiment, sweep_topologies)
from dgcn.metrics import read_records_jsonl


def tiny_config(out_dir, **overrides):
    cfg = {
        "synthetic": {"kind": "sbm_classification", "n": 60, "classes": 3,
                      "p_in": 0.3, "p_out": 0.02, "feature_dim": 6,
                      "label_fraction": 0.2, "seed": 3},
        "layers": [{"in_dim": 6, "out_dim": 8, "activation": "relu"},
                   {"in_dim": 8, "out_dim": 3, "activation": "softmax"}],
        "agents": 3,
        "partition_seed": 1,
        "mixing_source": "metropolis",
        "schedule": {"kind": "constant", "eta0": 0.5},
        "iterations": 5,
        "eval_every": 2,
        "repetitions": 1,
        "run_seed": 0,
        "out_dir": str(out_dir),
    }
    cfg.update(overrides)
    return ExperimentConfig.from_dict(cfg)


def _tree_bytes(root):
    # metadata.json carries wall-clock timestamps and config.json the output
    # path itself; every record/table/plot artifact must be byte-stable
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            if f in ("metadata.json", "config.json"):
                continue
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def diverging_overrides(out_dir):
    """Config whose squared loss blows up within a few iterations."""
    return dict(
        baselines=False,
        loss="mse",
        layers=[{"in_dim": 6, "out_dim": 4, "activation": "identity"},
                {"in_dim": 4, "out_dim": 1, "activation": "identity"}],
        schedule={"kind": "constant", "eta0": 1e6},
        iterations=60,
        synthetic={"kind": "sensor_grid_regression", "side": 6, "window": 6,
                   "seed": 1},
        out_dir=str(out_dir),
    )


class TestConfig:
    def test_requires_exactly_one_source(self):
        with pytest.raises(ValueError, match="exactly one"):
            ExperimentConfig.from_dict({"layers": [{"in_dim": 2, "out_dim": 2}]})

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            tiny_config("x", bogus_knob=3)

    def test_flag_overrides_win(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps(tiny_config(tmp_path / "runs").to_dict()))
        cfg = ExperimentConfig.from_json(path, {"iterations": 2, "agents": None})
        assert cfg.iterations == 2
        assert cfg.agents == 3  # None overrides are ignored


class TestRunExperiment:
    def test_zero_iterations_still_produces_artifacts(self, tmp_path):
        cfg = tiny_config(tmp_path / "runs", iterations=0)
        summary = run_experiment(cfg)
        root = tmp_path / "runs"
        for name in ("config.json", "metadata.json", "aggregate.csv",
                     "summary.json", "mixing.csv", "loss.svg",
                     "test_accuracy.svg"):
            assert (root / name).exists(), name
        records = read_records_jsonl(root / "rep00" / "distributed.jsonl")
        assert len(records) == 1
        assert records[0].iteration == 0
        assert summary["variants"]["distributed"]["final_test_accuracy"] is not None

    def test_byte_identical_reruns(self, tmp_path):
        run_experiment(tiny_config(tmp_path / "a"))
        run_experiment(tiny_config(tmp_path / "b"))
        a = _tree_bytes(tmp_path / "a")
        b = _tree_bytes(tmp_path / "b")
        assert a.keys() == b.keys()
        for k in a:
            assert a[k] == b[k], k

    def test_aggregate_matches_recomputation(self, tmp_path):
        cfg = tiny_config(tmp_path / "runs", repetitions=2)
        run_experiment(cfg)
        root = tmp_path / "runs"
        before = (root / "aggregate.csv").read_bytes()
        report(root)
        assert (root / "aggregate.csv").read_bytes() == before

    def test_aggregate_mean_std_are_exact(self, tmp_path):
        cfg = tiny_config(tmp_path / "runs", repetitions=3, iterations=3)
        run_experiment(cfg)
        root = tmp_path / "runs"
        runs = [read_records_jsonl(root / f"rep{r:02d}" / "distributed.jsonl")
                for r in range(3)]
        agg = aggregate_records({"distributed": runs})
        losses = [run[2].train_loss for run in runs]
        got = agg["distributed"]["metrics"]["train_loss"]
        assert got["mean"][2] == pytest.approx(float(np.mean(losses)), rel=1e-15)
        assert got["std"][2] == pytest.approx(float(np.std(losses)), rel=1e-12)

    def test_layer_width_mismatch_rejected(self, tmp_path):
        cfg = tiny_config(tmp_path / "runs")
        cfg.layers[0]["in_dim"] = 5
        with pytest.raises(ValueError, match="feature width"):
            run_experiment(cfg)

    def test_all_repetitions_failing_raises(self, tmp_path):
        overrides = diverging_overrides(tmp_path / "runs")
        overrides.pop("out_dir")
        cfg = tiny_config(tmp_path / "runs", **overrides)
        with pytest.raises(RuntimeError, match="all repetitions failed"):
            run_experiment(cfg)


class TestSweep:
    def test_topology_sweep_table(self, tmp_path):
        cfg = tiny_config(tmp_path / "sweep", iterations=3, baselines=False)
        rows = sweep_topologies(cfg, modes=["matching", "drop50", "ring", "line"])
        assert [r["mode"] for r in rows] == ["matching", "drop50", "ring", "line"]
        assert rows[0]["survival_fraction"] == 1.0
        for row in rows[1:]:
            assert 0.0 < row["survival_fraction"] <= 1.0
        assert (tmp_path / "sweep" / "sweep.csv").exists()
        assert (tmp_path / "sweep" / "ring" / "distributed.jsonl").exists()


class TestCli:
    def test_generate_with_invalid_spec_json_exits_one(self, tmp_path, capsys):
        empty = tmp_path / "empty.json"
        empty.write_text("")
        assert cli_main(["generate", "--kind", "sbm", "--out",
                         str(tmp_path / "d"), "--spec-json", str(empty)]) == 1

    def test_cli_pipeline(self, tmp_path, capsys):
        data = tmp_path / "data"
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"n": 60, "classes": 3, "p_in": 0.3,
                                    "p_out": 0.02, "feature_dim": 6,
                                    "label_fraction": 0.2}))
        assert cli_main(["generate", "--kind", "sbm", "--out", str(data),
                         "--seed", "4", "--spec-json", str(spec)]) == 0
        assert cli_main(["load-check", "--dataset", str(data)]) == 0
        out = capsys.readouterr().out
        assert "nodes: 60" in out
        assert "classes: 3" in out
        assert cli_main(["partition", "--dataset", str(data), "--agents", "3",
                         "--seed", "1", "--out", str(tmp_path / "part.json")]) == 0
        part = json.loads((tmp_path / "part.json").read_text())
        assert len(part["assign"]) == 60

    def test_design_topology_roundtrip(self, tmp_path, capsys):
        from dgcn.topology import load_mixing_csv

        A = tmp_path / "A.csv"
        A.write_text("0,0,1\n0,0,0\n1,0,0\n")
        out = tmp_path / "C.csv"
        assert cli_main(["design-topology", "--forbidden", str(A),
                         "--gamma", "0.4", "--out", str(out)]) == 0
        mixing = load_mixing_csv(out)
        assert mixing.entries[0, 2] == 0.0
        mixing.validate()

    def test_train_and_report(self, tmp_path, capsys):
        data_cfg = tiny_config(tmp_path / "runs", iterations=2).to_dict()
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(data_cfg))
        assert cli_main(["train", "--config", str(cfg_path)]) == 0
        assert cli_main(["report", "--runs", str(tmp_path / "runs")]) == 0
        assert cli_main(["train", "--config", str(cfg_path),
                         "--iterations", "1",
                         "--out-dir", str(tmp_path / "runs2")]) == 0
        recs = read_records_jsonl(tmp_path / "runs2" / "rep00" /
                                  "distributed.jsonl")
        assert len(recs) == 2  # override took effect

    def test_baseline_command(self, tmp_path, capsys):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(
            tiny_config(tmp_path / "runs", iterations=2).to_dict()))
        assert cli_main(["baseline", "--config", str(cfg_path), "--model",
                         "nn"]) == 0
        assert (tmp_path / "runs" / "baseline_nn.jsonl").exists()

    def test_sweep_command(self, tmp_path, capsys):
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(
            tiny_config(tmp_path / "sweep", iterations=1,
                        baselines=False).to_dict()))
        assert cli_main(["sweep", "--config", str(cfg_path),
                         "--modes", "matching,ring"]) == 0
        out = capsys.readouterr().out
        assert "matching" in out and "ring" in out

    def test_validation_errors_exit_one(self, tmp_path, capsys):
        assert cli_main(["load-check", "--dataset",
                         str(tmp_path / "missing")]) == 1
        bad_cfg = tmp_path / "bad.json"
        bad_cfg.write_text("{not json")
        assert cli_main(["train", "--config", str(bad_cfg)]) == 1

    def test_runtime_failures_exit_two(self, tmp_path, capsys):
        overrides = diverging_overrides(tmp_path / "runs")
        overrides.pop("out_dir")
        cfg = tiny_config(tmp_path / "runs", **overrides).to_dict()
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(cfg))
        assert cli_main(["train", "--config", str(cfg_path)]) == 2
