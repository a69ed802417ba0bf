"""Data-graph representation, shift operators, agent partitioning and pruning.

The data graph couples the samples: nodes carry feature vectors and
(optionally) labels, edges carry nonnegative similarity weights. A separate
assignment maps every node to one of ``m`` agents; boundary statistics of
that assignment drive the message budget of the distributed engine and the
constraints of the mixing-matrix design.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

SHIFT_KINDS = ("sym_renorm", "row_stochastic", "laplacian", "identity")


@dataclass
class DataGraph:
    """Undirected node-attributed graph with an optional shift operator.

    Attributes
    ----------
    n : int
        Number of nodes; ids are ``0 .. n-1``.
    adjacency : scipy.sparse.csr_matrix
        Symmetric weighted adjacency with zero diagonal. Both directions of
        every undirected edge are stored explicitly.
    features : (n, d) np.ndarray
        Row-wise node features.
    labels : (n,) np.ndarray or None
        Integer class ids (classification) or real targets (regression).
        Only meaningful where ``labeled`` is True.
    labeled : (n,) np.ndarray of bool or None
        Which nodes carry a ground-truth label.
    train_mask : (t,) np.ndarray of int
        Sorted node ids used for training; a subset of the labeled nodes.
    shift : scipy.sparse.csr_matrix or None
        The graph shift operator, populated by :func:`normalize_shift`.
    shift_kind : str or None
        Which normalization produced ``shift``.
    """

    n: int
    adjacency: sp.csr_matrix
    features: np.ndarray
    labels: np.ndarray | None = None
    labeled: np.ndarray | None = None
    train_mask: np.ndarray | None = None
    shift: sp.csr_matrix | None = None
    shift_kind: str | None = None

    def __post_init__(self):
        if self.train_mask is None:
            self.train_mask = np.empty(0, dtype=np.int64)
        self.train_mask = np.asarray(self.train_mask, dtype=np.int64)
        if self.adjacency.shape != (self.n, self.n):
            raise ValueError("adjacency shape does not match node count")
        if self.features.shape[0] != self.n:
            raise ValueError("feature row count does not match node count")
        if self.labels is not None and len(self.labels) != self.n:
            raise ValueError("label count does not match node count")
        if self.labeled is None and self.labels is not None:
            self.labeled = np.ones(self.n, dtype=bool)
        if self.train_mask.size:
            if self.train_mask.min() < 0 or self.train_mask.max() >= self.n:
                raise ValueError("train_mask contains invalid node ids")
            if self.labeled is None or not bool(self.labeled[self.train_mask].all()):
                raise ValueError("train_mask must be a subset of labeled nodes")

    # -- derived quantities ------------------------------------------------

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        """Number of undirected edges (half the stored entries)."""
        return self.adjacency.nnz // 2

    @property
    def num_directed_edges(self) -> int:
        """Number of stored ordered pairs (both directions of every edge)."""
        return self.adjacency.nnz

    def num_classes(self) -> int:
        if self.labels is None or not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("graph has no integer class labels")
        if self.labeled is not None:
            return int(self.labels[self.labeled].max()) + 1
        return int(self.labels.max()) + 1

    def eval_mask(self) -> np.ndarray:
        """Labeled nodes not used for training, as a sorted id array."""
        if self.labeled is None:
            raise ValueError("graph has no labels")
        mask = self.labeled.copy()
        mask[self.train_mask] = False
        return np.flatnonzero(mask)

    def is_connected(self) -> bool:
        if self.n == 0:
            return True
        ncomp, _ = connected_components(self.adjacency, directed=False)
        return ncomp == 1

    @classmethod
    def from_edges(cls, n, src, dst, weight=None, *, features=None, labels=None,
                   labeled=None, train_mask=None):
        """Build a graph from an edge list.

        Edges may list each undirected pair once or in both directions; when
        both directions appear their weights must agree (asymmetric inputs
        are rejected). Self-loops and duplicate ordered pairs are rejected;
        normalization adds its own self-loops where needed.
        """
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        if weight is None:
            weight = np.ones(len(src))
        weight = np.asarray(weight, dtype=np.float64)
        if not (len(src) == len(dst) == len(weight)):
            raise ValueError("edge arrays must have equal length")
        if len(src) and (src.min() < 0 or src.max() >= n or dst.min() < 0 or dst.max() >= n):
            bad = int(src[(src < 0) | (src >= n)][0]) if ((src < 0) | (src >= n)).any() \
                else int(dst[(dst < 0) | (dst >= n)][0])
            raise ValueError(f"edge endpoint {bad} outside [0, {n})")
        if (src == dst).any():
            node = int(src[src == dst][0])
            raise ValueError(f"self-loop on node {node} not allowed in edge input")
        if (weight < 0).any():
            raise ValueError("edge weights must be nonnegative")

        keys = src * n + dst
        order = np.argsort(keys, kind="stable")
        skeys = keys[order]
        if len(skeys) > 1 and (np.diff(skeys) == 0).any():
            i = int(np.flatnonzero(np.diff(skeys) == 0)[0])
            di, dj = divmod(int(skeys[i]), n)
            raise ValueError(f"duplicate edge ({di}, {dj})")
        rev = dst * n + src
        pos = np.searchsorted(skeys, rev)
        pos_clamped = np.minimum(pos, len(skeys) - 1) if len(skeys) else pos
        has_rev = len(skeys) > 0 and (skeys[pos_clamped] == rev)
        if len(skeys):
            mism = has_rev & (weight[order][pos_clamped] != weight)
            if mism.any():
                i = int(np.flatnonzero(mism)[0])
                raise ValueError(
                    f"directed input: edge ({int(src[i])}, {int(dst[i])}) and its "
                    f"reverse carry different weights")
            add = ~has_rev
        else:
            add = np.zeros(0, dtype=bool)
        all_src = np.concatenate([src, dst[add]])
        all_dst = np.concatenate([dst, src[add]])
        all_w = np.concatenate([weight, weight[add]])
        adj = sp.csr_matrix((all_w, (all_src, all_dst)), shape=(n, n))
        adj.sum_duplicates()
        if features is None:
            features = np.zeros((n, 0))
        features = np.asarray(features, dtype=np.float64)
        if labels is not None:
            labels = np.asarray(labels)
        if labeled is not None:
            labeled = np.asarray(labeled, dtype=bool)
        return cls(n=n, adjacency=adj, features=features, labels=labels,
                   labeled=labeled, train_mask=train_mask)


def normalize_shift(graph: DataGraph, kind: str) -> DataGraph:
    """Return a copy of ``graph`` with its shift operator populated.

    ``sym_renorm`` adds unit self-loops and applies symmetric degree
    normalization; ``row_stochastic`` divides each row of the raw adjacency
    by its degree (isolated nodes are rejected); ``laplacian`` builds the
    combinatorial Laplacian; ``identity`` discards the graph entirely, which
    turns any stacked model into a plain per-node network.
    """
    if kind not in SHIFT_KINDS:
        raise ValueError(f"unknown shift kind {kind!r}; expected one of {SHIFT_KINDS}")
    A = graph.adjacency
    n = graph.n
    if kind == "identity":
        shift = sp.identity(n, format="csr")
    elif kind == "sym_renorm":
        At = (A + sp.identity(n, format="csr")).tocsr()
        deg = np.asarray(At.sum(axis=1)).ravel()
        dinv = 1.0 / np.sqrt(deg)
        shift = sp.diags(dinv) @ At @ sp.diags(dinv)
    elif kind == "row_stochastic":
        deg = np.asarray(A.sum(axis=1)).ravel()
        if (deg <= 0).any():
            node = int(np.flatnonzero(deg <= 0)[0])
            raise ValueError(
                f"node {node} has zero degree; row_stochastic normalization "
                f"requires positive degrees")
        shift = sp.diags(1.0 / deg) @ A
    else:  # laplacian
        deg = np.asarray(A.sum(axis=1)).ravel()
        shift = (sp.diags(deg) - A).tocsr()
    return replace(graph, shift=sp.csr_matrix(shift), shift_kind=kind)


@dataclass
class Partition:
    """Assignment of data nodes to agents plus boundary statistics.

    ``boundary[k, z]`` counts the ordered adjacency entries (i, j) with
    ``assign[i] == k`` and ``assign[j] == z``; every undirected edge is
    counted once per direction. ``forbidden[k, z]`` is True exactly when
    ``k != z`` and no data edge links the two agents, i.e. the agent pair
    does not need a communication channel.
    """

    m: int
    assign: np.ndarray
    agent_nodes: list
    agent_train: list
    boundary: np.ndarray
    forbidden: np.ndarray

    @classmethod
    def from_assignment(cls, graph: DataGraph, assign, m: int) -> "Partition":
        assign = np.asarray(assign, dtype=np.int64)
        if assign.shape != (graph.n,):
            raise ValueError("assignment length must equal node count")
        if assign.size and (assign.min() < 0 or assign.max() >= m):
            raise ValueError(f"assignment values must lie in [0, {m})")
        agent_nodes = [np.flatnonzero(assign == k) for k in range(m)]
        train = graph.train_mask
        agent_train = [train[assign[train] == k] for k in range(m)]
        coo = graph.adjacency.tocoo()
        boundary = np.zeros((m, m), dtype=np.int64)
        np.add.at(boundary, (assign[coo.row], assign[coo.col]), 1)
        forbidden = (boundary == 0)
        np.fill_diagonal(forbidden, False)
        return cls(m=m, assign=assign, agent_nodes=agent_nodes,
                   agent_train=agent_train, boundary=boundary, forbidden=forbidden)

    def required_pairs(self):
        """Ordered agent pairs (k, z), k != z, that share at least one data edge."""
        out = set()
        ks, zs = np.nonzero(self.boundary)
        for k, z in zip(ks.tolist(), zs.tolist()):
            if k != z:
                out.add((k, z))
        return out


def partition_bfs(graph: DataGraph, m: int, rng_seed: int) -> Partition:
    """Partition nodes over ``m`` agents by seeded randomized breadth-first growth.

    ``m`` seed nodes are drawn uniformly without replacement; frontiers then
    expand one hop per round. When several agents reach an unassigned node in
    the same round the winner is drawn uniformly among the claimants. Nodes in
    components never reached by any frontier are assigned round-robin at the
    end. The result is a deterministic function of the graph and the seed.
    """
    n = graph.n
    if n == 0:
        raise ValueError("cannot partition an empty graph")
    if m <= 0 or m > n:
        raise ValueError(f"agent count must satisfy 1 <= m <= {n}, got {m}")
    rng = np.random.default_rng(rng_seed)
    indptr, indices = graph.adjacency.indptr, graph.adjacency.indices

    assign = np.full(n, -1, dtype=np.int64)
    seeds = rng.choice(n, size=m, replace=False)
    frontiers = []
    for k, s in enumerate(seeds):
        assign[s] = k
        frontiers.append([int(s)])

    while any(frontiers):
        claims = {}
        for k in range(m):
            for u in frontiers[k]:
                for v in indices[indptr[u]:indptr[u + 1]]:
                    if assign[v] < 0:
                        claims.setdefault(int(v), set()).add(k)
        new_frontiers = [[] for _ in range(m)]
        for v in sorted(claims):
            if assign[v] >= 0:
                continue
            claimants = sorted(claims[v])
            winner = claimants[rng.integers(len(claimants))]
            assign[v] = winner
            new_frontiers[winner].append(v)
        frontiers = new_frontiers

    leftovers = np.flatnonzero(assign < 0)
    for idx, v in enumerate(leftovers):
        assign[v] = idx % m
    return Partition.from_assignment(graph, assign, m)


@dataclass
class PruneResult:
    graph: DataGraph
    survival_fraction: float
    edges_before: int
    edges_after: int


def prune_to_comm(graph: DataGraph, partition: Partition, comm_edges) -> PruneResult:
    """Drop data edges whose agent pair has no communication link.

    ``comm_edges`` is a symmetric set of ordered agent pairs. Every data edge
    (i, j) with ``assign[i] != assign[j]`` and ``(assign[i], assign[j])`` not
    in the set is removed from a copy of the graph, whose shift operator is
    then re-normalized with the original kind. The survival fraction of the
    original edges is reported alongside; pruning twice with the same set is
    a no-op the second time.
    """
    pairs = {(int(k), int(z)) for (k, z) in comm_edges}
    for (k, z) in pairs:
        if (z, k) not in pairs:
            raise ValueError(f"comm_edges must be symmetric; ({k}, {z}) has no reverse")
        if not (0 <= k < partition.m and 0 <= z < partition.m):
            raise ValueError(f"comm edge ({k}, {z}) outside agent range")
    coo = graph.adjacency.tocoo()
    a_i = partition.assign[coo.row]
    a_j = partition.assign[coo.col]
    keep = a_i == a_j
    cross = ~keep
    if cross.any():
        allowed = np.fromiter(
            ((int(k), int(z)) in pairs for k, z in zip(a_i[cross], a_j[cross])),
            dtype=bool, count=int(cross.sum()))
        keep[np.flatnonzero(cross)] = allowed
    adj = sp.csr_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])),
                        shape=(graph.n, graph.n))
    pruned = replace(graph, adjacency=adj, shift=None)
    if graph.shift_kind is not None:
        pruned = normalize_shift(pruned, graph.shift_kind)
    before = graph.num_edges
    after = pruned.num_edges
    fraction = 1.0 if before == 0 else after / before
    return PruneResult(graph=pruned, survival_fraction=fraction,
                       edges_before=before, edges_after=after)
