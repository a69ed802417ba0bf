"""Multi-agent training engine built on explicit message passing.

Each agent owns a block of data-graph nodes, a private copy of the model
weights, and local optimizer state. One training iteration runs a forward
pass (one message round per shift application), a mirrored backward pass
along transposed data edges, a local optimizer step, and a consensus
combination of the neighbors' parameter vectors through the mixing matrix.
Agents only ever read their own rows plus the payloads delivered at round
barriers; cross-agent sums are always accumulated in sender-id order so
results are identical between the serial and the threaded execution modes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .gcn import (LOSS_KINDS, CROSS_ENTROPY_CLAMP, ParamBank, TrainingDiverged,
                  _activate, _activation_grad, chebyshev_scale, masked_loss,
                  validate_chain)
from .metrics import TrainRecord, accuracy as _accuracy
from .topology import MixingMatrix

OPTIMIZERS = ("gd", "momentum", "adam")


@dataclass
class ScheduleSpec:
    """Step-size schedule: a constant or the diminishing ``eta0 / (1 + t/tau)``."""

    kind: str
    eta0: float
    tau: float = 100.0

    def __post_init__(self):
        if self.kind not in ("constant", "diminishing"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def step_size(schedule: ScheduleSpec, t: int) -> float:
    if t < 0:
        raise ValueError("iteration index must be nonnegative")
    if schedule.kind == "constant":
        return schedule.eta0
    return schedule.eta0 / (1.0 + t / schedule.tau)


@dataclass
class OptimizerSpec:
    kind: str = "gd"
    beta: float = 0.9      # momentum buffer decay
    beta1: float = 0.9     # adam first-moment decay
    beta2: float = 0.999   # adam second-moment decay
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")


@dataclass
class MessageBatch:
    """One point-to-point transfer of per-node partial sums."""

    round: tuple          # (iteration, layer, hop, direction)
    from_agent: int
    to_agent: int
    targets: np.ndarray   # global node ids on the receiving agent
    values: np.ndarray    # (len(targets), width)

    def __iter__(self):
        for i, t in enumerate(self.targets):
            yield int(t), self.values[i]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class AgentState:
    """Everything one agent owns: weights, optimizer slots, cached activations."""

    agent_id: int
    params: ParamBank
    local_nodes: np.ndarray
    local_train: np.ndarray
    momentum_buf: np.ndarray | None = None
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_t: int = 0
    forward_cache: list = field(default_factory=list)


def local_step(state: AgentState, gradient: np.ndarray, eta_t: float,
               optimizer: OptimizerSpec) -> np.ndarray:
    """One local optimizer update; returns the pre-consensus parameter vector.

    All optimizer statistics are strictly agent-local. ``gd`` steps against
    the raw gradient, ``momentum`` against a running buffer, ``adam`` with
    bias-corrected per-agent first and second moments.
    """
    if eta_t <= 0:
        raise ValueError("step size must be positive")
    if not np.isfinite(gradient).all():
        raise ValueError(f"agent {state.agent_id}: non-finite gradient")
    w = state.params.flatten()
    if optimizer.kind == "gd":
        return w - eta_t * gradient
    if optimizer.kind == "momentum":
        if state.momentum_buf is None:
            state.momentum_buf = np.zeros_like(w)
        state.momentum_buf = optimizer.beta * state.momentum_buf + gradient
        return w - eta_t * state.momentum_buf
    # adam
    if state.adam_m is None:
        state.adam_m = np.zeros_like(w)
        state.adam_v = np.zeros_like(w)
    state.adam_t += 1
    state.adam_m = optimizer.beta1 * state.adam_m + (1 - optimizer.beta1) * gradient
    state.adam_v = optimizer.beta2 * state.adam_v + (1 - optimizer.beta2) * gradient ** 2
    mhat = state.adam_m / (1 - optimizer.beta1 ** state.adam_t)
    vhat = state.adam_v / (1 - optimizer.beta2 ** state.adam_t)
    return w - eta_t * mhat / (np.sqrt(vhat) + optimizer.eps)


def consensus_step(psi_list, mixing: MixingMatrix):
    """Combine neighbors' parameter vectors through the mixing matrix.

    Returns the new per-agent vectors and the number of scalars exchanged
    (each vector travels once per nonzero off-diagonal entry).
    """
    C = mixing.entries
    m = len(psi_list)
    if C.shape[0] != m:
        raise ValueError(f"mixing matrix is {C.shape[0]}x{C.shape[0]} but there "
                         f"are {m} agents")
    p = psi_list[0].size
    new = []
    scalars = 0
    for k in range(m):
        # flatnonzero yields ascending sender ids, which fixes the summation order
        nz = np.flatnonzero(C[k])
        acc = np.zeros(p)
        for z in nz:
            acc += C[k, z] * psi_list[z]
            if z != k:
                scalars += p
        new.append(acc)
    return new, scalars


class DistributedGCN:
    """Message-passing simulator over a partitioned data graph.

    Parameters are validated once at construction: the shift operator must
    exist, and every ordered agent pair coupled by a data edge must have a
    communication channel (a nonzero mixing entry), otherwise the protocol
    error names a data edge that cannot be served.
    """

    def __init__(self, graph, partition, mixing, specs, *, loss_kind="cross_entropy",
                 execution="serial", capture_messages=False):
        if graph.shift is None:
            raise ValueError("graph has no shift operator; call normalize_shift first")
        if loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {loss_kind!r}")
        if execution not in ("serial", "threads"):
            raise ValueError(f"unknown execution mode {execution!r}")
        if mixing.m != partition.m:
            raise ValueError("mixing matrix size does not match agent count")
        self.graph = graph
        self.partition = partition
        self.mixing = mixing
        self.specs = validate_chain(specs)
        self.loss_kind = loss_kind
        self.execution = execution
        self.capture_messages = capture_messages
        self.message_log = []
        self.counters = {"forward": 0, "backward": 0, "consensus": 0}
        self.m = partition.m
        self.n_train_total = int(graph.train_mask.size)
        self._pool = None
        self._needs_cheb = any(s.basis == "chebyshev" for s in self.specs)
        self._cheb_bound = chebyshev_scale(graph.shift)
        self._build_local_views()
        self._check_protocol()
        self.agents = None

    # -- construction -------------------------------------------------------

    def _build_local_views(self):
        S = self.graph.shift.tocsr()
        St = S.T.tocsr()
        nodes = self.partition.agent_nodes
        self.X_local = [self.graph.features[nodes[k]] for k in range(self.m)]
        self._g2l = {}
        for k in range(self.m):
            for loc, g in enumerate(nodes[k]):
                self._g2l[int(g)] = (k, loc)
        train = self.graph.train_mask
        assign = self.partition.assign
        self._train_local = []
        self._train_labels = []
        for k in range(self.m):
            tk = train[assign[train] == k]
            locs = np.asarray([self._g2l[int(i)][1] for i in tk], dtype=np.int64)
            self._train_local.append(locs)
            if self.graph.labels is not None:
                self._train_labels.append(np.asarray(self.graph.labels)[tk])
            else:
                self._train_labels.append(np.empty(0))

        def blocks_of(M):
            blocks, nnz, targets, senders = {}, {}, {}, [[] for _ in range(self.m)]
            for k in range(self.m):
                rows = M[nodes[k]]
                for z in range(self.m):
                    blk = sp.csr_matrix(rows[:, nodes[z]])
                    if blk.nnz == 0:
                        continue
                    blocks[(k, z)] = blk
                    nnz[(k, z)] = blk.nnz
                    if k != z:
                        row_nnz = np.diff(blk.indptr)
                        targets[(k, z)] = np.flatnonzero(row_nnz > 0)
                        senders[z].append(k)
            for z in range(self.m):
                senders[z].sort()
            return blocks, nnz, targets, senders

        self._fw, self._fw_nnz, self._fw_targets, self._fw_dest = blocks_of(S)
        self._bw, self._bw_nnz, self._bw_targets, self._bw_dest = blocks_of(St)
        if self._needs_cheb:
            self._fw_s = {kz: b / self._cheb_bound for kz, b in self._fw.items()}
            self._bw_s = {kz: b / self._cheb_bound for kz, b in self._bw.items()}

    def _check_protocol(self):
        # a channel is needed exactly where the shift couples two agents' rows
        comm = self.mixing.comm_edges
        for (k, z), blk in self._fw.items():
            if k == z or (z, k) in comm:
                continue
            coo = blk.tocoo()
            i = int(self.partition.agent_nodes[k][coo.row[0]])
            j = int(self.partition.agent_nodes[z][coo.col[0]])
            raise ValueError(
                f"protocol error: data edge ({i}, {j}) requires a communication "
                f"channel between agents {z} and {k}, but the mixing matrix has "
                f"no such link")

    def init_params(self, seed: int, mode: str = "distinct", std: float = 1e-3):
        """Draw per-agent initial weights.

        ``shared`` copies to every agent the same draw a single-party run
        with this seed would use; ``distinct`` derives one stream per agent.
        """
        if mode not in ("distinct", "shared"):
            raise ValueError(f"unknown init mode {mode!r}")
        banks = []
        if mode == "shared":
            rng = np.random.default_rng(seed)
            base = ParamBank.gaussian(self.specs, rng, std=std)
            banks = [base.copy() for _ in range(self.m)]
        else:
            for k in range(self.m):
                rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
                banks.append(ParamBank.gaussian(self.specs, rng, std=std))
        nodes = self.partition.agent_nodes
        assign = self.partition.assign
        train = self.graph.train_mask
        self.agents = [AgentState(agent_id=k, params=banks[k], local_nodes=nodes[k],
                                  local_train=train[assign[train] == k])
                       for k in range(self.m)]
        self._dropout_rngs = [np.random.default_rng(np.random.SeedSequence([seed, k, 7]))
                              for k in range(self.m)]
        return self

    # -- execution helpers ----------------------------------------------------

    def _run(self, fn, items):
        if self.execution == "threads" and self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.m)
        if self.execution == "threads":
            return list(self._pool.map(fn, items))
        return [fn(i) for i in items]

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
        self.execution = "serial"

    # -- one message round ------------------------------------------------------

    def _round(self, M, *, transpose, scaled, phase, meta):
        """Apply the shift (or its transpose) to per-agent row blocks.

        Senders locally weight and aggregate their rows per destination, one
        batch per ordered pair; receivers add delivered payloads to their own
        local term, in sender-id order.
        """
        if scaled:
            blocks = self._bw_s if transpose else self._fw_s
        else:
            blocks = self._bw if transpose else self._fw
        nnz = self._bw_nnz if transpose else self._fw_nnz
        targets = self._bw_targets if transpose else self._fw_targets
        dest = self._bw_dest if transpose else self._fw_dest
        width = M[0].shape[1]

        def send(z):
            out = []
            for k in dest[z]:
                full = blocks[(k, z)] @ M[z]
                tl = targets[(k, z)]
                out.append((k, tl, full[tl]))
            return out

        outboxes = self._run(send, range(self.m))
        inbox = [[] for _ in range(self.m)]
        for z in range(self.m):
            for k, tl, payload in outboxes[z]:
                inbox[k].append((z, tl, payload))
                self.counters[phase] += nnz[(k, z)] * width
                if self.capture_messages:
                    self.message_log.append(MessageBatch(
                        round=meta, from_agent=z, to_agent=k,
                        targets=self.partition.agent_nodes[k][tl],
                        values=payload))

        def integrate(k):
            own = blocks.get((k, k))
            acc = own @ M[k] if own is not None else np.zeros_like(M[k])
            for z, tl, payload in sorted(inbox[k], key=lambda e: e[0]):
                acc[tl] += payload
            return acc

        return self._run(integrate, range(self.m))

    # -- forward / backward -------------------------------------------------------

    def forward(self, iteration=0, *, dropout_p=0.0):
        """One full inference sweep; returns the stacked (n, q) outputs."""
        if self.agents is None:
            raise RuntimeError("agents not initialized; call init_params first")
        for st in self.agents:
            st.forward_cache = []
        H = self.X_local
        for li, spec in enumerate(self.specs):
            P = spec.order
            if dropout_p > 0.0:
                keep = 1.0 - dropout_p

                def mask_one(k):
                    mk = (self._dropout_rngs[k].random(H[k].shape) < keep) / keep
                    return H[k] * mk, mk

                masked = self._run(mask_one, range(self.m))
                inp = [mv[0] for mv in masked]
                masks = [mv[1] for mv in masked]
            else:
                inp = H
                masks = [None] * self.m

            def transform(k):
                banks = self.agents[k].params.layers[li]
                return [inp[k] @ banks[p] for p in range(P + 1)]

            xt = self._run(transform, range(self.m))
            if spec.basis == "monomial":
                M = [xt[k][P] for k in range(self.m)]
                for p in range(P - 1, -1, -1):
                    DM = self._round(M, transpose=False, scaled=False, phase="forward",
                                     meta=(iteration, li, P - 1 - p, "forward"))
                    M = [xt[k][p] + DM[k] for k in range(self.m)]
                pre = M
            else:
                b1 = [xt[k][P] for k in range(self.m)]
                b2 = [np.zeros_like(b1[k]) for k in range(self.m)]
                hop = 0
                for p in range(P - 1, 0, -1):
                    Db1 = self._round(b1, transpose=False, scaled=True, phase="forward",
                                      meta=(iteration, li, hop, "forward"))
                    hop += 1
                    b1, b2 = [xt[k][p] + 2.0 * Db1[k] - b2[k] for k in range(self.m)], b1
                Db1 = self._round(b1, transpose=False, scaled=True, phase="forward",
                                  meta=(iteration, li, hop, "forward"))
                pre = [xt[k][0] + Db1[k] - b2[k] for k in range(self.m)]
            out = self._run(lambda k: _activate(pre[k], spec.activation), range(self.m))
            for k, st in enumerate(self.agents):
                st.forward_cache.append(
                    {"inp": inp[k], "pre": pre[k], "out": out[k], "mask": masks[k]})
            H = out
        q = self.specs[-1].out_dim
        stacked = np.empty((self.graph.n, q))
        for k in range(self.m):
            stacked[self.partition.agent_nodes[k]] = H[k]
        return stacked

    def _local_loss_grads(self):
        """Each agent's loss gradient rows, scaled by the global 1/|T| constant."""
        T = self.n_train_total
        q = self.specs[-1].out_dim

        def one(k):
            st = self.agents[k]
            out = st.forward_cache[-1]["out"]
            g = np.zeros((len(st.local_nodes), q))
            locs = self._train_local[k]
            if locs.size == 0:
                return g
            y = self._train_labels[k]
            if self.loss_kind == "cross_entropy":
                yi = y.astype(np.int64)
                probs = np.maximum(out[locs, yi], CROSS_ENTROPY_CLAMP)
                g[locs, yi] = -1.0 / (probs * T)
            else:
                t = np.asarray(y, dtype=np.float64)
                if t.ndim == 1:
                    t = t[:, None]
                g[locs] = 2.0 * (out[locs] - t) / T
            return g

        return self._run(one, range(self.m))

    def backward(self, iteration=0):
        """Distributed backpropagation; returns per-agent flat gradients."""
        if self.agents is None or not self.agents[0].forward_cache:
            raise RuntimeError("no cached forward pass for this backward call")
        G = self._local_loss_grads()
        grads = [ParamBank.zeros(self.specs) for _ in range(self.m)]
        for li in range(len(self.specs) - 1, -1, -1):
            spec = self.specs[li]
            P = spec.order

            def to_pre(k):
                c = self.agents[k].forward_cache[li]
                return _activation_grad(G[k], c["pre"], c["out"], spec.activation)

            g_pre = self._run(to_pre, range(self.m))
            if spec.basis == "monomial":
                bank_adj = [g_pre]
                adj = g_pre
                for p in range(1, P + 1):
                    adj = self._round(adj, transpose=True, scaled=False, phase="backward",
                                      meta=(iteration, li, p - 1, "backward"))
                    bank_adj.append(adj)
            else:
                bank_adj = [None] * (P + 1)
                bank_adj[0] = g_pre
                gb = [None] * (P + 1)
                hop = 0
                first = self._round(g_pre, transpose=True, scaled=True, phase="backward",
                                    meta=(iteration, li, hop, "backward"))
                hop += 1
                gb[1] = first
                if P >= 2:
                    gb[2] = [-g_pre[k] for k in range(self.m)]
                for p in range(1, P):
                    bank_adj[p] = gb[p]
                    nxt = self._round(gb[p], transpose=True, scaled=True, phase="backward",
                                      meta=(iteration, li, hop, "backward"))
                    hop += 1
                    nxt = [2.0 * v for v in nxt]
                    gb[p + 1] = nxt if gb[p + 1] is None else \
                        [gb[p + 1][k] + nxt[k] for k in range(self.m)]
                    if p + 2 <= P:
                        gb[p + 2] = [-gb[p][k] for k in range(self.m)] if gb[p + 2] is None \
                            else [gb[p + 2][k] - gb[p][k] for k in range(self.m)]
                bank_adj[P] = gb[P]

            def accumulate(k):
                st = self.agents[k]
                c = st.forward_cache[li]
                inp = c["inp"]
                g_in = np.zeros_like(inp)
                banks = st.params.layers[li]
                for p in range(P + 1):
                    grads[k].layers[li][p][...] = inp.T @ bank_adj[p][k]
                    g_in += bank_adj[p][k] @ banks[p].T
                if c["mask"] is not None:
                    g_in = g_in * c["mask"]
                return g_in

            G = self._run(accumulate, range(self.m))
        return [grads[k].flatten() for k in range(self.m)]

    # -- parameter access ----------------------------------------------------------

    def param_flats(self):
        return [st.params.flatten() for st in self.agents]

    def param_banks(self):
        return [st.params for st in self.agents]

    def set_param_flats(self, flats):
        for st, w in zip(self.agents, flats):
            st.params = ParamBank.from_flat(self.specs, w)


def dist_forward(net: DistributedGCN, iteration=0):
    """Run one inference sweep; returns (outputs, per-agent caches, counters)."""
    before = dict(net.counters)
    outputs = net.forward(iteration)
    delta = {k: net.counters[k] - before[k] for k in net.counters}
    return outputs, [st.forward_cache for st in net.agents], delta


def dist_backward(net: DistributedGCN, iteration=0):
    """Run one distributed backpropagation; returns (per-agent flat grads, counters)."""
    before = dict(net.counters)
    grads = net.backward(iteration)
    delta = {k: net.counters[k] - before[k] for k in net.counters}
    return grads, delta


@dataclass
class DistConfig:
    schedule: ScheduleSpec
    iterations: int
    seed: int = 0
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    consensus_period: int | None = 1
    loss: str = "cross_entropy"
    eval_every: int = 10
    init: str = "distinct"
    init_std: float = 1e-3
    dropout: float = 0.0
    execution: str = "serial"
    capture_messages: bool = False
    compute_stationarity: bool = True

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iteration count must be nonnegative")
        if self.consensus_period is not None and self.consensus_period < 1:
            raise ValueError("consensus period must be >= 1 (or None for never)")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.init not in ("distinct", "shared"):
            raise ValueError(f"unknown init mode {self.init!r}")


def train_distributed(graph, partition, mixing, specs, config: DistConfig):
    """Run the full distributed training loop.

    Per iteration: forward sweep, local loss gradients, distributed
    backpropagation, per-agent optimizer step, and (on iterations where
    ``t % consensus_period == 0``) one consensus combination. Appends a
    closing evaluation record after the last update, so ``iterations=0``
    still evaluates the initialization. Returns (engine, records).
    """
    from .metrics import consensus_residual, max_pairwise_distance, stationarity

    net = DistributedGCN(graph, partition, mixing, specs, loss_kind=config.loss,
                         execution=config.execution,
                         capture_messages=config.capture_messages)
    net.init_params(config.seed, mode=config.init, std=config.init_std)
    train = graph.train_mask
    if train.size == 0:
        raise ValueError("graph has an empty training mask")
    eval_ids = graph.eval_mask()
    records = []
    g_best = np.inf
    T = config.iterations
    try:
        for t in range(T + 1):
            fwd_before = net.counters["forward"]
            outputs = net.forward(t, dropout_p=config.dropout if t < T else 0.0)
            loss = masked_loss(outputs, graph.labels, train, config.loss)
            if not np.isfinite(loss):
                raise TrainingDiverged(t, records)
            # backpropagate before any evaluation forward can clobber the caches
            grads = None
            bwd_scalars = 0
            if t < T:
                bwd_before = net.counters["backward"]
                grads = net.backward(t)
                bwd_scalars = net.counters["backward"] - bwd_before
            flats = net.param_flats()
            rec = TrainRecord(iteration=t,
                              eta=step_size(config.schedule, t) if t < T else None,
                              train_loss=loss,
                              consensus_residual=consensus_residual(flats),
                              max_pairwise_distance=max_pairwise_distance(flats),
                              messages_forward=net.counters["forward"] - fwd_before,
                              messages_backward=bwd_scalars)
            if (t % config.eval_every == 0) or t == T:
                if eval_ids.size:
                    if config.dropout > 0 and t < T:
                        eval_out = net.forward(t, dropout_p=0.0)
                    else:
                        eval_out = outputs
                    if config.loss == "cross_entropy":
                        rec.test_accuracy = _accuracy(eval_out, graph.labels, eval_ids)
                    else:
                        rec.test_mse = masked_loss(eval_out, graph.labels, eval_ids, "mse")
                if config.compute_stationarity:
                    rec.stationarity = stationarity(graph, partition, net.param_banks(),
                                                    config.loss)
                    g_best = min(g_best, rec.stationarity)
                    rec.stationarity_best = g_best
            records.append(rec)
            if t == T:
                break
            eta = step_size(config.schedule, t)
            psi = [local_step(net.agents[k], grads[k], eta, config.optimizer)
                   for k in range(net.m)]
            if config.consensus_period is not None and t % config.consensus_period == 0:
                psi, scalars = consensus_step(psi, mixing)
                net.counters["consensus"] += scalars
                rec.messages_consensus = scalars
            net.set_param_flats(psi)
    finally:
        net.close()
    return net, records
