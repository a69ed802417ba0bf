"""Graph-convolutional layer math: forward pass, losses, exact backprop.

A layer of order ``P`` carries ``P + 1`` weight banks and computes
``phi(sum_p poly_p(D) X W_p)`` where ``poly_p`` is either the monomial
``D^p`` or the degree-p Chebyshev polynomial of the rescaled shift. All
routines support one weight-bank set per agent (rows transformed by their
owner's weights), which is both the semantics of the multi-agent model and
the reference the message-passing engine is checked against; the classical
single-parameter network is the one-agent special case.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json

import numpy as np
import scipy.sparse as sp

ACTIVATIONS = ("relu", "softmax", "identity")
BASES = ("monomial", "chebyshev")
LOSS_KINDS = ("cross_entropy", "mse")
CROSS_ENTROPY_CLAMP = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    order: int = 1
    activation: str = "relu"
    basis: str = "monomial"

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError("layer dimensions must be positive")
        if self.order < 1:
            raise ValueError("layer order must be at least 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.basis not in BASES:
            raise ValueError(f"unknown basis {self.basis!r}")

    def to_dict(self):
        return {"in_dim": self.in_dim, "out_dim": self.out_dim, "order": self.order,
                "activation": self.activation, "basis": self.basis}

    @classmethod
    def from_dict(cls, d):
        return cls(in_dim=int(d["in_dim"]), out_dim=int(d["out_dim"]),
                   order=int(d.get("order", 1)), activation=d.get("activation", "relu"),
                   basis=d.get("basis", "monomial"))


def validate_chain(specs):
    specs = list(specs)
    if not specs:
        raise ValueError("at least one layer required")
    for i in range(1, len(specs)):
        if specs[i].in_dim != specs[i - 1].out_dim:
            raise ValueError(
                f"layer {i}: in_dim {specs[i].in_dim} does not match "
                f"previous out_dim {specs[i - 1].out_dim}")
    for i, s in enumerate(specs[:-1]):
        if s.activation == "softmax":
            raise ValueError(f"layer {i}: softmax is only allowed on the final layer")
    return specs


class ParamBank:
    """Per-layer weight banks, flattenable to a single coefficient vector.

    Layer ``l`` of order ``P`` holds matrices ``W_0 .. W_P`` of shape
    ``(in_dim, out_dim)``; flatten/unflatten order is layer-major then
    bank-major, each matrix in C order.
    """

    __slots__ = ("specs", "layers")

    def __init__(self, specs, layers):
        self.specs = validate_chain(specs)
        self.layers = layers
        for li, spec in enumerate(self.specs):
            if len(layers[li]) != spec.order + 1:
                raise ValueError(f"layer {li}: expected {spec.order + 1} weight banks")
            for W in layers[li]:
                if W.shape != (spec.in_dim, spec.out_dim):
                    raise ValueError(f"layer {li}: weight shape {W.shape} does not "
                                     f"match ({spec.in_dim}, {spec.out_dim})")

    @classmethod
    def zeros(cls, specs):
        return cls(specs, [[np.zeros((s.in_dim, s.out_dim)) for _ in range(s.order + 1)]
                           for s in specs])

    @classmethod
    def gaussian(cls, specs, rng, std=1e-3):
        return cls(specs, [[rng.normal(0.0, std, size=(s.in_dim, s.out_dim))
                            for _ in range(s.order + 1)] for s in specs])

    @property
    def num_params(self) -> int:
        return sum((s.order + 1) * s.in_dim * s.out_dim for s in self.specs)

    def flatten(self) -> np.ndarray:
        return np.concatenate([W.ravel() for banks in self.layers for W in banks])

    @classmethod
    def from_flat(cls, specs, vec):
        vec = np.asarray(vec, dtype=np.float64)
        expect = sum((s.order + 1) * s.in_dim * s.out_dim for s in specs)
        if vec.size != expect:
            raise ValueError(f"flat vector length {vec.size} does not match specs "
                             f"({expect})")
        layers, off = [], 0
        for s in specs:
            banks = []
            for _ in range(s.order + 1):
                size = s.in_dim * s.out_dim
                banks.append(vec[off:off + size].reshape(s.in_dim, s.out_dim).copy())
                off += size
            layers.append(banks)
        if off != vec.size:
            raise ValueError(f"flat vector length {vec.size} does not match specs ({off})")
        return cls(specs, layers)

    def copy(self):
        return ParamBank(self.specs, [[W.copy() for W in banks] for banks in self.layers])


# -- activations -------------------------------------------------------------

def _activate(pre, kind):
    if kind == "relu":
        return np.maximum(pre, 0.0)
    if kind == "identity":
        return pre
    # softmax, row-wise and numerically stabilized
    shifted = pre - pre.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _activation_grad(g_out, pre, out, kind):
    """Convert a gradient w.r.t. the activation output into one w.r.t. its input."""
    if kind == "relu":
        return g_out * (pre > 0)
    if kind == "identity":
        return g_out
    dot = (g_out * out).sum(axis=1, keepdims=True)
    return out * (g_out - dot)


def chebyshev_scale(shift) -> float:
    """Upper bound on the spectral radius used to rescale the shift.

    The infinity norm (max absolute row sum) bounds the spectral radius of
    any matrix, is cheap for sparse operators, and is deterministic.
    """
    bound = float(np.abs(shift).sum(axis=1).max()) if shift.shape[0] else 1.0
    return bound if bound > 0 else 1.0


# -- forward / backward ------------------------------------------------------

@dataclass
class ForwardCache:
    params: object
    specs: list
    shift: object
    assign: np.ndarray
    rows_by_agent: list
    inputs: list = field(default_factory=list)        # per layer, post-dropout
    pres: list = field(default_factory=list)          # per layer pre-activation
    outs: list = field(default_factory=list)          # per layer post-activation
    dropout_masks: list = field(default_factory=list)  # per layer or None
    cheb_bound: float = 1.0


def _poly_combine(shift, xt, basis, cheb_bound):
    """Combine transformed banks ``xt[p]`` through the shift polynomial."""
    P = len(xt) - 1
    if basis == "monomial":
        acc = xt[P]
        for p in range(P - 1, -1, -1):
            acc = xt[p] + shift @ acc
        return acc
    # Chebyshev via the Clenshaw recurrence on the rescaled shift
    Ds = shift / cheb_bound
    b1 = xt[P]
    b2 = np.zeros_like(b1)
    for p in range(P - 1, 0, -1):
        b1, b2 = xt[p] + 2.0 * (Ds @ b1) - b2, b1
    return xt[0] + Ds @ b1 - b2


def _poly_adjoint(shift_t, g_pre, P, basis, cheb_bound):
    """Gradients w.r.t. each transformed bank, given the pre-activation gradient."""
    if basis == "monomial":
        grads = [g_pre]
        acc = g_pre
        for _ in range(P):
            acc = shift_t @ acc
            grads.append(acc)
        return grads
    Ds_t = shift_t / cheb_bound
    grads = [None] * (P + 1)
    grads[0] = g_pre
    gb = [None] * (P + 1)
    gb[1] = Ds_t @ g_pre
    if P >= 2:
        gb[2] = -g_pre
    for p in range(1, P):
        grads[p] = gb[p]
        nxt = 2.0 * (Ds_t @ gb[p])
        gb[p + 1] = nxt if gb[p + 1] is None else gb[p + 1] + nxt
        if p + 2 <= P:
            gb[p + 2] = -gb[p] if gb[p + 2] is None else gb[p + 2] - gb[p]
    grads[P] = gb[P]
    return grads


def block_forward(shift, X, assign, banks, *, dropout_p=0.0, dropout_rngs=None):
    """Forward pass with one weight-bank set per agent.

    ``assign`` maps each row of ``X`` to the agent whose weights transform
    it. Returns the final outputs and a cache sufficient for an exact
    backward pass. With ``dropout_p > 0`` an inverted-dropout mask drawn
    from the owner agent's generator is applied to every layer input.
    """
    assign = np.asarray(assign, dtype=np.int64)
    m = len(banks)
    specs = banks[0].specs
    for b in banks[1:]:
        if b.specs != specs:
            raise ValueError("all agents must share the same layer specs")
    if X.shape[1] != specs[0].in_dim:
        raise ValueError(f"layer 0: input width {X.shape[1]} does not match "
                         f"in_dim {specs[0].in_dim}")
    rows_by_agent = [np.flatnonzero(assign == k) for k in range(m)]
    cache = ForwardCache(params=banks, specs=specs, shift=shift, assign=assign,
                         rows_by_agent=rows_by_agent,
                         cheb_bound=chebyshev_scale(shift))
    H = np.asarray(X, dtype=np.float64)
    for li, spec in enumerate(specs):
        if dropout_p > 0.0:
            mask = np.empty_like(H)
            keep = 1.0 - dropout_p
            for k, rows in enumerate(rows_by_agent):
                mask[rows] = (dropout_rngs[k].random((len(rows), H.shape[1])) < keep) / keep
            H = H * mask
            cache.dropout_masks.append(mask)
        else:
            cache.dropout_masks.append(None)
        cache.inputs.append(H)
        xt = [np.empty((H.shape[0], spec.out_dim)) for _ in range(spec.order + 1)]
        for k, rows in enumerate(rows_by_agent):
            for p in range(spec.order + 1):
                xt[p][rows] = H[rows] @ banks[k].layers[li][p]
        pre = _poly_combine(shift, xt, spec.basis, cache.cheb_bound)
        H = _activate(pre, spec.activation)
        cache.pres.append(pre)
        cache.outs.append(H)
    return H, cache


def block_backward(cache, banks, grad_outputs):
    """Exact gradients of a scalar loss w.r.t. every agent's weight banks.

    ``grad_outputs`` is the loss gradient at the final activation output.
    Returns (per-agent list of ``ParamBank`` gradients, gradient w.r.t. the
    input features).
    """
    if len(banks) != len(cache.params) or \
            any(b is not c for b, c in zip(banks, cache.params)):
        raise ValueError("stale cache: parameters do not match the cached forward pass")
    specs = cache.specs
    shift_t = cache.shift.T.tocsr() if sp.issparse(cache.shift) else cache.shift.T
    m = len(banks)
    grads = [ParamBank.zeros(specs) for _ in range(m)]
    G = np.asarray(grad_outputs, dtype=np.float64)
    for li in range(len(specs) - 1, -1, -1):
        spec = specs[li]
        g_pre = _activation_grad(G, cache.pres[li], cache.outs[li], spec.activation)
        bank_adj = _poly_adjoint(shift_t, g_pre, spec.order, spec.basis, cache.cheb_bound)
        inp = cache.inputs[li]
        g_in = np.zeros_like(inp)
        for k, rows in enumerate(cache.rows_by_agent):
            for p in range(spec.order + 1):
                grads[k].layers[li][p][...] = inp[rows].T @ bank_adj[p][rows]
                g_in[rows] += bank_adj[p][rows] @ banks[k].layers[li][p].T
        if cache.dropout_masks[li] is not None:
            g_in = g_in * cache.dropout_masks[li]
        G = g_in
    return grads, G


def gc_forward(shift, X, params, *, dropout_p=0.0, dropout_rng=None):
    """Single-parameter (shared-weight) forward pass; see :func:`block_forward`."""
    assign = np.zeros(X.shape[0], dtype=np.int64)
    rngs = [dropout_rng] if dropout_rng is not None else None
    return block_forward(shift, X, assign, [params], dropout_p=dropout_p,
                         dropout_rngs=rngs)


def gc_backward(cache, params, grad_outputs):
    """Gradient of the shared-weight network; see :func:`block_backward`."""
    if len(cache.params) != 1 or cache.params[0] is not params:
        raise ValueError("stale cache: parameters do not match the cached forward pass")
    grads, g_in = block_backward(cache, cache.params, grad_outputs)
    return grads[0], g_in


# -- losses ------------------------------------------------------------------

def masked_loss(outputs, labels, mask, kind="cross_entropy"):
    """Mean per-node loss over the masked rows.

    Cross-entropy expects row-stochastic outputs (softmax already applied)
    and integer labels; probabilities are clamped at 1e-12 before the log.
    Squared error sums over output coordinates per node.
    """
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("loss mask must not be empty")
    if kind == "cross_entropy":
        probs = outputs[mask, np.asarray(labels, dtype=np.int64)[mask]]
        return float(-np.log(np.maximum(probs, CROSS_ENTROPY_CLAMP)).mean())
    if kind == "mse":
        targets = np.asarray(labels, dtype=np.float64)
        if targets.ndim == 1:
            targets = targets[:, None]
        diff = outputs[mask] - targets[mask]
        return float((diff * diff).sum(axis=1).mean())
    raise ValueError(f"unknown loss kind {kind!r}")


def masked_loss_grad(outputs, labels, mask, kind="cross_entropy"):
    """Gradient of :func:`masked_loss` w.r.t. the network outputs."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ValueError("loss mask must not be empty")
    g = np.zeros_like(outputs)
    if kind == "cross_entropy":
        y = np.asarray(labels, dtype=np.int64)[mask]
        probs = np.maximum(outputs[mask, y], CROSS_ENTROPY_CLAMP)
        g[mask, y] = -1.0 / (probs * mask.size)
        return g
    if kind == "mse":
        targets = np.asarray(labels, dtype=np.float64)
        if targets.ndim == 1:
            targets = targets[:, None]
        g[mask] = 2.0 * (outputs[mask] - targets[mask]) / mask.size
        return g
    raise ValueError(f"unknown loss kind {kind!r}")


# -- centralized training ------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, iteration, records=None):
        super().__init__(f"loss became non-finite at iteration {iteration}")
        self.iteration = iteration
        self.records = records or []


@dataclass
class CentralConfig:
    eta: float
    iterations: int
    seed: int = 0
    loss: str = "cross_entropy"
    dropout: float = 0.0
    eval_every: int = 10
    init_std: float = 1e-3

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("step size must be positive")
        if self.iterations < 0:
            raise ValueError("iteration count must be nonnegative")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")


def train_centralized(graph, specs, config: CentralConfig):
    """Full-batch gradient descent on the masked loss of a stacked network.

    Weights start from a zero-mean Gaussian with standard deviation 1e-3.
    Returns the trained bank and one record per iteration plus a closing
    evaluation record (so zero iterations still yields the evaluation of the
    initialization).
    """
    from .metrics import TrainRecord, accuracy

    specs = validate_chain(specs)
    if graph.shift is None:
        raise ValueError("graph has no shift operator; call normalize_shift first")
    rng = np.random.default_rng(config.seed)
    params = ParamBank.gaussian(specs, rng, std=config.init_std)
    train = graph.train_mask
    if train.size == 0:
        raise ValueError("graph has an empty training mask")
    eval_ids = graph.eval_mask()
    drop_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 977]))

    records = []
    for t in range(config.iterations + 1):
        out, cache = gc_forward(graph.shift, graph.features, params,
                                dropout_p=config.dropout if t < config.iterations else 0.0,
                                dropout_rng=drop_rng if config.dropout > 0 else None)
        loss = masked_loss(out, graph.labels, train, config.loss)
        if not np.isfinite(loss):
            raise TrainingDiverged(t, records)
        rec = TrainRecord(iteration=t, eta=config.eta if t < config.iterations else None,
                          train_loss=loss)
        do_eval = (t % config.eval_every == 0) or t == config.iterations
        if do_eval and eval_ids.size:
            if config.dropout > 0 and t < config.iterations:
                eval_out, _ = gc_forward(graph.shift, graph.features, params)
            else:
                eval_out = out
            if config.loss == "cross_entropy":
                rec.test_accuracy = accuracy(eval_out, graph.labels, eval_ids)
            else:
                rec.test_mse = masked_loss(eval_out, graph.labels, eval_ids, "mse")
        records.append(rec)
        if t == config.iterations:
            break
        grad_out = masked_loss_grad(out, graph.labels, train, config.loss)
        g, _ = gc_backward(cache, params, grad_out)
        flat = params.flatten() - config.eta * g.flatten()
        params = ParamBank.from_flat(specs, flat)
    return params, records


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params: ParamBank):
    """Write a bank as a flat coefficient CSV with a layer-chain header line."""
    header = json.dumps({"layers": [s.to_dict() for s in params.specs]})
    with open(path, "w") as fh:
        fh.write("# " + header + "\n")
        for v in params.flatten():
            fh.write(f"{v:.17g}\n")


def load_checkpoint(path):
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# "):
            raise ValueError(f"{path}:1: missing checkpoint header")
        meta = json.loads(header[2:])
        specs = [LayerSpec.from_dict(d) for d in meta["layers"]]
        values = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                values.append(float(line))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed value: {exc}") from exc
    return specs, ParamBank.from_flat(specs, np.asarray(values))
