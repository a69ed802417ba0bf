"""Command-line interface.

Exit codes: 0 on success, 1 on validation errors (bad flags, malformed
files, inconsistent configs), 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np


def _cmd_load_check(args):
    from .datasets import dataset_summary, load_dataset

    graph = load_dataset(args.dataset)
    summary = dataset_summary(graph)
    for key in ("nodes", "edges", "train", "classes", "features"):
        if key in summary:
            print(f"{key}: {summary[key]}")
    print(f"connected: {graph.is_connected()}")
    return 0


def _cmd_generate(args):
    from .datasets import generate_synthetic, save_dataset, synthetic_spec_from_dict

    spec_dict = {}
    if args.spec_json:
        with open(args.spec_json) as fh:
            spec_dict = json.load(fh)
    kind = {"sbm": "sbm_classification",
            "sensor-grid": "sensor_grid_regression"}[args.kind]
    spec_dict.setdefault("kind", kind)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    graph = generate_synthetic(synthetic_spec_from_dict(spec_dict))
    save_dataset(graph, args.out)
    print(f"wrote {graph.n} nodes / {graph.num_edges} edges to {args.out}")
    return 0


def _cmd_partition(args):
    from .datasets import load_dataset
    from .graphs import partition_bfs

    graph = load_dataset(args.dataset)
    part = partition_bfs(graph, args.agents, args.seed)
    sizes = [int(len(nodes)) for nodes in part.agent_nodes]
    print(f"agents: {part.m}")
    print(f"sizes: {sizes}")
    cross = int(part.boundary.sum() - np.trace(part.boundary))
    print(f"cross-agent directed edges: {cross}")
    if args.out:
        payload = {"m": part.m, "assign": part.assign.tolist(),
                   "boundary": part.boundary.tolist(),
                   "forbidden": part.forbidden.astype(int).tolist()}
        with open(args.out, "w") as fh:
            json.dump(payload, fh)
        print(f"wrote {args.out}")
    return 0


def _cmd_design_topology(args):
    from .topology import design_mixing_admm, load_forbidden_csv, save_mixing_csv

    A = load_forbidden_csv(args.forbidden)
    mixing, state = design_mixing_admm(A, args.gamma, rho=args.rho,
                                       max_iter=args.max_iter, tol=args.tol,
                                       rng_seed=args.seed)
    save_mixing_csv(args.out, mixing.entries)
    zeros = int((mixing.entries == 0).sum())
    print(f"iterations: {state.iteration} converged: {state.converged}")
    print(f"zero entries: {zeros}/{A.size}")
    if state.forbidden_violations:
        print(f"WARNING: forbidden entries above threshold: "
              f"{state.forbidden_violations}", file=sys.stderr)
        return 2
    print(f"wrote {args.out}")
    return 0


_TRAIN_OVERRIDES = ("agents", "iterations", "consensus_period", "run_seed",
                    "partition_seed", "out_dir", "repetitions", "eval_every")


def _config_from_args(args):
    from .harness import ExperimentConfig

    overrides = {k: getattr(args, k, None) for k in _TRAIN_OVERRIDES}
    if getattr(args, "eta0", None) is not None:
        with open(args.config) as fh:
            base = json.load(fh)
        sched = dict(base.get("schedule", {"kind": "constant"}))
        sched["eta0"] = args.eta0
        overrides["schedule"] = sched
    return ExperimentConfig.from_json(args.config, overrides)


def _cmd_train(args):
    from .harness import run_experiment

    config = _config_from_args(args)
    summary = run_experiment(config)
    dist = summary["variants"].get("distributed", {})
    acc = dist.get("final_test_accuracy")
    mse = dist.get("final_test_mse")
    loss = dist.get("final_train_loss")
    print(f"final train loss: {loss['mean']:.6g}" if loss else "no loss recorded")
    if acc:
        print(f"final test accuracy: {acc['mean']:.4f} +- {acc['std']:.4f}")
    if mse:
        print(f"final test mse: {mse['mean']:.6g} +- {mse['std']:.6g}")
    print(f"artifacts in {config.out_dir}")
    return 0


def _cmd_baseline(args):
    from .gcn import CentralConfig, train_centralized
    from .harness import _load_graph
    from .graphs import normalize_shift
    from . import metrics as M
    import os

    config = _config_from_args(args)
    graph = _load_graph(config)
    if args.model == "nn":
        graph = normalize_shift(graph, "identity")
    eta = args.eta if args.eta is not None else config.schedule["eta0"] / config.agents
    central = CentralConfig(eta=eta, iterations=config.iterations,
                            seed=config.run_seed, loss=config.loss,
                            dropout=config.dropout, eval_every=config.eval_every)
    _, records = train_centralized(graph, config.layer_specs(), central)
    os.makedirs(config.out_dir, exist_ok=True)
    out = os.path.join(config.out_dir, f"baseline_{args.model}.jsonl")
    M.write_records_jsonl(out, records)
    summary = M.summarize(records)
    print(json.dumps(summary, indent=2))
    print(f"wrote {out}")
    return 0


def _cmd_sweep(args):
    from .harness import sweep_topologies

    config = _config_from_args(args)
    modes = args.modes.split(",") if args.modes else None
    rows = sweep_topologies(config, modes)
    for row in rows:
        acc = row.get("final_test_accuracy")
        acc_str = f" accuracy={acc:.4f}" if acc is not None else ""
        print(f"{row['mode']}: survival={row['survival_fraction']:.3f}"
              f" loss={row['final_train_loss']:.5g}{acc_str}")
    return 0


def _cmd_report(args):
    from .harness import report

    report(args.runs)
    print(f"rebuilt aggregate.csv and plots in {args.runs}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dgcn",
        description="Distributed graph convolutional network training simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("load-check", help="validate a dataset directory")
    p.add_argument("--dataset", required=True)
    p.set_defaults(fn=_cmd_load_check)

    p = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    p.add_argument("--kind", choices=("sbm", "sensor-grid"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--spec-json", help="JSON file with generator parameters")
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("partition", help="BFS-partition a dataset over agents")
    p.add_argument("--dataset", required=True)
    p.add_argument("--agents", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_partition)

    p = sub.add_parser("design-topology", help="optimize a mixing matrix")
    p.add_argument("--forbidden", required=True, help="0/1 CSV of forbidden pairs")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--max-iter", type=int, default=5000)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_design_topology)

    def add_config_flags(p, eta=True):
        p.add_argument("--config", required=True, help="experiment JSON config")
        for name in _TRAIN_OVERRIDES:
            p.add_argument(f"--{name.replace('_', '-')}",
                           type=str if name == "out_dir" else int, default=None)
        if eta:
            p.add_argument("--eta0", type=float, default=None)

    p = sub.add_parser("train", help="run the distributed training pipeline")
    add_config_flags(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("baseline", help="train a stacked (single-party) model")
    add_config_flags(p)
    p.add_argument("--model", choices=("gcn", "nn"), required=True)
    p.add_argument("--eta", type=float, default=None)
    p.set_defaults(fn=_cmd_baseline)

    p = sub.add_parser("sweep", help="train under several agent topologies")
    add_config_flags(p)
    p.add_argument("--modes", help="comma-separated topology modes")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("report", help="re-aggregate an experiment directory")
    p.add_argument("--runs", required=True)
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failure boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
