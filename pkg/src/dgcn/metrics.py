"""Convergence diagnostics and training-record handling.

The consensus residual measures the distance of the stacked per-agent
parameters from the agreement subspace; the stationarity measure evaluates
how close their blockwise mean is to a stationary point of the constrained
training problem. Both are computed out-of-band from agent snapshots, never
through the message protocol.
"""

from __future__ import annotations

from dataclasses import dataclass
import csv as _csv
import json

import numpy as np

from .gcn import block_backward, block_forward, masked_loss_grad, ParamBank

RECORD_FIELDS = (
    "iteration", "eta", "train_loss", "test_accuracy", "test_mse",
    "consensus_residual", "max_pairwise_distance", "stationarity",
    "stationarity_best", "messages_forward", "messages_backward",
    "messages_consensus",
)


@dataclass
class TrainRecord:
    """Per-iteration metrics of one training run."""

    iteration: int
    eta: float | None = None
    train_loss: float = float("nan")
    test_accuracy: float | None = None
    test_mse: float | None = None
    consensus_residual: float = 0.0
    max_pairwise_distance: float = 0.0
    stationarity: float | None = None
    stationarity_best: float | None = None
    messages_forward: int = 0
    messages_backward: int = 0
    messages_consensus: int = 0

    def to_dict(self):
        return {f: getattr(self, f) for f in RECORD_FIELDS}

    @classmethod
    def from_dict(cls, d):
        return cls(**{f: d.get(f) for f in RECORD_FIELDS})


def consensus_residual(flats) -> float:
    """Euclidean distance of the stacked parameters from their blockwise mean."""
    if len(flats) == 0:
        raise ValueError("at least one agent required")
    W = np.stack(flats)
    return float(np.linalg.norm(W - W.mean(axis=0)))


def max_pairwise_distance(flats) -> float:
    """Largest average absolute coordinate difference over agent pairs."""
    m = len(flats)
    if m == 0:
        raise ValueError("at least one agent required")
    worst = 0.0
    for k in range(m):
        for z in range(k + 1, m):
            worst = max(worst, float(np.abs(flats[k] - flats[z]).mean()))
    return worst


def accuracy(outputs, labels, eval_mask) -> float:
    """Fraction of argmax-correct rows; ties resolve to the lowest class index."""
    eval_mask = np.asarray(eval_mask, dtype=np.int64)
    if eval_mask.size == 0:
        raise ValueError("evaluation mask must not be empty")
    pred = np.argmax(outputs[eval_mask], axis=1)
    return float((pred == np.asarray(labels, dtype=np.int64)[eval_mask]).mean())


def stationarity(graph, partition, banks, loss_kind="cross_entropy") -> float:
    """Proximity of the blockwise-mean parameters to a stationary point.

    Every agent is set to the mean parameter vector, the exact per-agent
    gradient blocks of the global masked loss are computed centrally, and
    the squared norm of their sum divided by the agent count is returned
    (the algebraic form of the projected-gradient inner product).
    """
    specs = banks[0].specs
    mean_flat = np.mean([b.flatten() for b in banks], axis=0)
    mean_bank = ParamBank.from_flat(specs, mean_flat)
    eq = [mean_bank] * len(banks)
    out, cache = block_forward(graph.shift, graph.features, partition.assign, eq)
    g_out = masked_loss_grad(out, graph.labels, graph.train_mask, loss_kind)
    grads, _ = block_backward(cache, eq, g_out)
    total = np.sum([g.flatten() for g in grads], axis=0)
    return float(total @ total) / len(banks)


# -- record IO -----------------------------------------------------------------

def write_records_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def read_records_jsonl(path):
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(TrainRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed record: {exc}") from exc
    return records


def write_records_csv(path, records):
    with open(path, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.to_dict())


def summarize(records) -> dict:
    """Final and best metrics of one record series."""
    if not records:
        raise ValueError("no records to summarize")
    final = records[-1]
    accs = [r.test_accuracy for r in records if r.test_accuracy is not None]
    mses = [r.test_mse for r in records if r.test_mse is not None]
    return {
        "iterations": final.iteration,
        "final_train_loss": final.train_loss,
        "final_test_accuracy": final.test_accuracy,
        "final_test_mse": final.test_mse,
        "best_test_accuracy": max(accs) if accs else None,
        "best_test_mse": min(mses) if mses else None,
        "final_consensus_residual": final.consensus_residual,
        "final_max_pairwise_distance": final.max_pairwise_distance,
        "final_stationarity": final.stationarity,
        "final_stationarity_best": final.stationarity_best,
        "total_messages_forward": sum(r.messages_forward for r in records),
        "total_messages_backward": sum(r.messages_backward for r in records),
        "total_messages_consensus": sum(r.messages_consensus for r in records),
    }
