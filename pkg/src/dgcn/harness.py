"""Experiment orchestration: configs, pipelines, sweeps, and reports.

One experiment = dataset (loaded or generated) -> partition -> mixing-matrix
construction -> distributed training, optionally next to the two stacked
baselines (graph-aware and graph-free). Repetitions vary only the weight
initialization seed. Artifacts per run: JSON-Lines records, aggregated
mean/std CSV, and SVG plots; wall-clock metadata lives in a separate file so
record artifacts stay byte-reproducible.
"""

from __future__ import annotations

import copy
import csv as _csv
from dataclasses import dataclass, field
import datetime
import json
import os

import numpy as np

from . import metrics as M
from .datasets import (dataset_summary, generate_synthetic, load_dataset,
                       synthetic_spec_from_dict)
from .distributed import (DistConfig, OptimizerSpec, ScheduleSpec,
                          train_distributed)
from .gcn import CentralConfig, LayerSpec, train_centralized, validate_chain
from .graphs import Partition, normalize_shift, partition_bfs, prune_to_comm
from .svgplot import line_plot
from .topology import (MixingMatrix, design_mixing_admm, load_mixing_csv,
                       metropolis_weights, save_mixing_csv)

TOPOLOGY_MODES = ("matching", "complete", "ring", "line")


@dataclass
class ExperimentConfig:
    """Fully resolved description of one experiment."""

    dataset_dir: str | None = None
    synthetic: dict | None = None
    shift: str = "sym_renorm"
    layers: list = field(default_factory=list)
    agents: int = 10
    partition_seed: int = 0
    mixing_source: str = "metropolis"     # metropolis | admm | file
    mixing_file: str | None = None
    gamma: float = 0.5
    rho: float = 1.0
    topology: str = "matching"            # matching | complete | ring | line
    drop_fraction: float = 0.0            # extra random comm-edge removal
    optimizer: dict = field(default_factory=lambda: {"kind": "gd"})
    schedule: dict = field(default_factory=lambda: {"kind": "constant", "eta0": 0.5})
    iterations: int = 300
    consensus_period: int | None = 1
    loss: str = "cross_entropy"
    eval_every: int = 10
    repetitions: int = 1
    run_seed: int = 0
    init: str = "distinct"
    dropout: float = 0.0
    baselines: bool = True
    baseline_eta: float | None = None
    compute_stationarity: bool = True
    out_dir: str = "runs"

    def __post_init__(self):
        if (self.dataset_dir is None) == (self.synthetic is None):
            raise ValueError("exactly one of dataset_dir and synthetic must be given")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if not self.layers:
            raise ValueError("layer chain must not be empty")
        if self.mixing_source not in ("metropolis", "admm", "file"):
            raise ValueError(f"unknown mixing source {self.mixing_source!r}")
        if self.mixing_source == "file" and not self.mixing_file:
            raise ValueError("mixing_source 'file' requires mixing_file")
        if self.topology not in TOPOLOGY_MODES:
            raise ValueError(f"unknown topology {self.topology!r}")

    @classmethod
    def from_dict(cls, d: dict, overrides: dict | None = None):
        data = dict(d)
        if overrides:
            data.update({k: v for k, v in overrides.items() if v is not None})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path, overrides=None):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(data, overrides)

    def to_dict(self):
        return {f: copy.deepcopy(getattr(self, f)) for f in self.__dataclass_fields__}

    def layer_specs(self):
        return validate_chain([LayerSpec.from_dict(d) for d in self.layers])


def _load_graph(config: ExperimentConfig):
    if config.dataset_dir is not None:
        graph = load_dataset(config.dataset_dir)
    else:
        graph = generate_synthetic(synthetic_spec_from_dict(config.synthetic))
    return normalize_shift(graph, config.shift)


def _comm_pairs_for_topology(partition: Partition, mode: str, drop_fraction: float,
                             rng) -> set:
    m = partition.m
    if mode == "matching":
        pairs = partition.required_pairs()
    elif mode == "complete":
        pairs = {(k, z) for k in range(m) for z in range(m) if k != z}
    elif mode == "ring":
        pairs = set()
        for k in range(m):
            z = (k + 1) % m
            pairs |= {(k, z), (z, k)}
    else:  # line
        pairs = set()
        for k in range(m - 1):
            pairs |= {(k, k + 1), (k + 1, k)}
    if drop_fraction > 0.0 and mode in ("matching", "complete"):
        pairs = _drop_comm_edges(pairs, m, drop_fraction, rng)
    return pairs


def _drop_comm_edges(pairs: set, m: int, fraction: float, rng) -> set:
    """Randomly remove a fraction of undirected comm edges, keeping connectivity."""
    und = sorted({tuple(sorted(p)) for p in pairs})
    rng.shuffle(und)
    # greedily grow a spanning set that stays protected
    parent = list(range(m))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    protected = set()
    for (a, b) in und:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            protected.add((a, b))
    removable = [e for e in und if e not in protected]
    n_drop = int(round(fraction * len(und)))
    n_drop = min(n_drop, len(removable))
    dropped = set(removable[:n_drop])
    kept = [e for e in und if e not in dropped]
    out = set()
    for (a, b) in kept:
        out |= {(a, b), (b, a)}
    return out


def build_mixing(config: ExperimentConfig, partition: Partition, comm_pairs=None):
    """Resolve the configured mixing-matrix source for a given partition."""
    if config.mixing_source == "file":
        return load_mixing_csv(config.mixing_file)
    if config.mixing_source == "admm":
        mixing, state = design_mixing_admm(partition.forbidden, config.gamma,
                                           rho=config.rho)
        if state.forbidden_violations:
            raise RuntimeError(
                f"mixing design left forbidden entries nonzero: "
                f"{state.forbidden_violations}")
        return mixing
    pairs = comm_pairs if comm_pairs is not None else partition.required_pairs()
    if not pairs and partition.m > 1:
        pairs = {(k, k + 1) for k in range(partition.m - 1)}
        pairs |= {(z, k) for (k, z) in pairs}
    if partition.m == 1:
        return MixingMatrix(m=1, entries=np.ones((1, 1)), gamma=1.0)
    return metropolis_weights(pairs, partition.m)


def _prepare(config: ExperimentConfig):
    graph = _load_graph(config)
    partition = partition_bfs(graph, config.agents, config.partition_seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.run_seed, 555]))
    pairs = _comm_pairs_for_topology(partition, config.topology,
                                     config.drop_fraction, rng)
    survival = 1.0
    if config.topology != "complete" or config.drop_fraction > 0:
        result = prune_to_comm(graph, partition, pairs)
        survival = result.survival_fraction
        graph = result.graph
        partition = Partition.from_assignment(graph, partition.assign, partition.m)
    mixing = build_mixing(config, partition, comm_pairs=pairs)
    return graph, partition, mixing, survival


def _dist_config(config: ExperimentConfig, seed: int) -> DistConfig:
    return DistConfig(
        schedule=ScheduleSpec(**config.schedule),
        iterations=config.iterations,
        seed=seed,
        optimizer=OptimizerSpec(**config.optimizer),
        consensus_period=config.consensus_period,
        loss=config.loss,
        eval_every=config.eval_every,
        init=config.init,
        dropout=config.dropout,
        compute_stationarity=config.compute_stationarity,
    )


def run_experiment(config: ExperimentConfig) -> dict:
    """Run all repetitions plus baselines and write artifacts.

    Returns a summary dictionary (also written to ``summary.json``). Each
    repetition r gets its own init seed ``run_seed + r``; partitioning and
    topology stay fixed across repetitions.
    """
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "metadata.json"), "w") as fh:
        json.dump({"started": datetime.datetime.now().isoformat()}, fh)
    with open(os.path.join(config.out_dir, "config.json"), "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)

    graph, partition, mixing, survival = _prepare(config)
    save_mixing_csv(os.path.join(config.out_dir, "mixing.csv"), mixing.entries)
    specs = config.layer_specs()
    if specs[0].in_dim != graph.feature_dim:
        raise ValueError(f"layer 0 in_dim {specs[0].in_dim} does not match the "
                         f"dataset feature width {graph.feature_dim}")

    eta0 = config.schedule["eta0"]
    baseline_eta = config.baseline_eta if config.baseline_eta is not None \
        else eta0 / config.agents
    failures = []
    variant_records = {"distributed": []}
    if config.baselines:
        variant_records["centralized"] = []
        variant_records["graph_free"] = []
    for r in range(config.repetitions):
        rep_dir = os.path.join(config.out_dir, f"rep{r:02d}")
        os.makedirs(rep_dir, exist_ok=True)
        seed = config.run_seed + r
        try:
            _, records = train_distributed(graph, partition, mixing, specs,
                                           _dist_config(config, seed))
            M.write_records_jsonl(os.path.join(rep_dir, "distributed.jsonl"), records)
            variant_records["distributed"].append(records)
            if config.baselines:
                central_cfg = CentralConfig(eta=baseline_eta,
                                            iterations=config.iterations,
                                            seed=seed, loss=config.loss,
                                            dropout=config.dropout,
                                            eval_every=config.eval_every)
                _, recs = train_centralized(graph, specs, central_cfg)
                M.write_records_jsonl(os.path.join(rep_dir, "centralized.jsonl"), recs)
                variant_records["centralized"].append(recs)
                flat_graph = normalize_shift(graph, "identity")
                _, recs = train_centralized(flat_graph, specs, central_cfg)
                M.write_records_jsonl(os.path.join(rep_dir, "graph_free.jsonl"), recs)
                variant_records["graph_free"].append(recs)
        except Exception as exc:  # noqa: BLE001 - per-repetition isolation
            failures.append({"repetition": r, "error": str(exc)})
    if len(failures) == config.repetitions:
        raise RuntimeError(f"all repetitions failed: {failures}")

    aggregate = aggregate_records(variant_records)
    write_aggregate_csv(os.path.join(config.out_dir, "aggregate.csv"), aggregate)
    _write_plots(config.out_dir, aggregate, loss_kind=config.loss)

    summary = {
        "survival_fraction": survival,
        "dataset": dataset_summary(graph),
        "failures": failures,
        "variants": {},
    }
    for name, runs in variant_records.items():
        if runs:
            finals = [M.summarize(records) for records in runs]
            summary["variants"][name] = _mean_std_of_summaries(finals)
    with open(os.path.join(config.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def _mean_std_of_summaries(finals):
    out = {}
    for key in finals[0]:
        vals = [f[key] for f in finals if f[key] is not None]
        if not vals:
            out[key] = None
        else:
            out[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return out


def aggregate_records(variant_records) -> dict:
    """Per-iteration mean/std across repetitions for every variant and metric."""
    out = {}
    for name, runs in variant_records.items():
        if not runs:
            continue
        iters = [r.iteration for r in runs[0]]
        per_metric = {}
        for metric in ("train_loss", "test_accuracy", "test_mse",
                       "consensus_residual", "max_pairwise_distance",
                       "stationarity"):
            rows_mean, rows_std = [], []
            for idx in range(len(iters)):
                vals = [getattr(run[idx], metric) for run in runs
                        if idx < len(run) and getattr(run[idx], metric) is not None]
                if vals:
                    rows_mean.append(float(np.mean(vals)))
                    rows_std.append(float(np.std(vals)))
                else:
                    rows_mean.append(None)
                    rows_std.append(None)
            per_metric[metric] = {"mean": rows_mean, "std": rows_std}
        out[name] = {"iterations": iters, "metrics": per_metric}
    return out


def write_aggregate_csv(path, aggregate):
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["variant", "iteration", "metric", "mean", "std"])
        for name in sorted(aggregate):
            block = aggregate[name]
            for metric in sorted(block["metrics"]):
                series = block["metrics"][metric]
                for it, mean, std in zip(block["iterations"], series["mean"],
                                         series["std"]):
                    if mean is None:
                        continue
                    writer.writerow([name, it, metric, f"{mean:.17g}", f"{std:.17g}"])


def _series_for_plot(aggregate, metric):
    series = []
    for name in sorted(aggregate):
        block = aggregate[name]
        xs, ys, lo, hi = [], [], [], []
        for it, mean, std in zip(block["iterations"],
                                 block["metrics"][metric]["mean"],
                                 block["metrics"][metric]["std"]):
            if mean is None:
                continue
            xs.append(it)
            ys.append(mean)
            lo.append(mean - std)
            hi.append(mean + std)
        if ys:
            series.append({"label": name, "x": xs, "y": ys, "band": (lo, hi)})
    return series


def _write_plots(out_dir, aggregate, loss_kind):
    loss_series = _series_for_plot(aggregate, "train_loss")
    if loss_series:
        line_plot(os.path.join(out_dir, "loss.svg"), loss_series,
                  title="training loss", xlabel="iteration", ylabel="loss", ylog=True)
    metric = "test_accuracy" if loss_kind == "cross_entropy" else "test_mse"
    acc_series = _series_for_plot(aggregate, metric)
    if acc_series:
        line_plot(os.path.join(out_dir, f"{metric}.svg"), acc_series,
                  title=metric.replace("_", " "), xlabel="iteration",
                  ylabel=metric.replace("_", " "), ylog=False)


def report(runs_dir) -> dict:
    """Recompute the aggregate CSV and plots from the per-repetition JSONL files."""
    cfg_path = os.path.join(runs_dir, "config.json")
    if not os.path.exists(cfg_path):
        raise ValueError(f"{runs_dir} does not contain config.json")
    with open(cfg_path) as fh:
        cfg = json.load(fh)
    variant_records = {}
    for entry in sorted(os.listdir(runs_dir)):
        rep_dir = os.path.join(runs_dir, entry)
        if not (entry.startswith("rep") and os.path.isdir(rep_dir)):
            continue
        for fname in sorted(os.listdir(rep_dir)):
            if fname.endswith(".jsonl"):
                name = fname[:-6]
                records = M.read_records_jsonl(os.path.join(rep_dir, fname))
                variant_records.setdefault(name, []).append(records)
    if not variant_records:
        raise ValueError(f"{runs_dir} contains no repetition records")
    aggregate = aggregate_records(variant_records)
    write_aggregate_csv(os.path.join(runs_dir, "aggregate.csv"), aggregate)
    _write_plots(runs_dir, aggregate, loss_kind=cfg.get("loss", "cross_entropy"))
    return aggregate


def sweep_topologies(config: ExperimentConfig, modes=None) -> list:
    """Train the distributed model under several agent topologies.

    Emits ``sweep.csv`` with the edge survival fraction and final metrics
    per mode, plus one records file per mode.
    """
    if modes is None:
        modes = ["matching", "drop25", "drop50", "drop75", "ring", "line"]
    os.makedirs(config.out_dir, exist_ok=True)
    rows = []
    for mode in modes:
        sub = config.to_dict()
        sub["out_dir"] = os.path.join(config.out_dir, mode)
        if mode.startswith("drop"):
            sub["topology"] = "complete"
            sub["drop_fraction"] = int(mode[4:]) / 100.0
        else:
            sub["topology"] = mode
            sub["drop_fraction"] = 0.0
        sub_cfg = ExperimentConfig.from_dict(sub)
        graph, partition, mixing, survival = _prepare(sub_cfg)
        specs = sub_cfg.layer_specs()
        _, records = train_distributed(graph, partition, mixing, specs,
                                       _dist_config(sub_cfg, sub_cfg.run_seed))
        os.makedirs(sub_cfg.out_dir, exist_ok=True)
        M.write_records_jsonl(os.path.join(sub_cfg.out_dir, "distributed.jsonl"),
                              records)
        summary = M.summarize(records)
        rows.append({"mode": mode, "survival_fraction": survival, **summary})
    with open(os.path.join(config.out_dir, "sweep.csv"), "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return rows
