"""Mixing matrices for the agents' network and their ADMM-based design.

The consensus step combines neighboring agents' parameters through a
symmetric doubly stochastic matrix whose deflated spectral radius controls
the contraction speed toward agreement. Matrices can be built directly with
Metropolis weights on a given communication graph, or optimized: given the
boolean matrix of agent pairs that share no data edge, an ADMM loop drives
the corresponding entries to zero (sparsifying the communication topology)
while keeping the matrix inside the feasible set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SYMMETRY_TOL = 1e-12
ROW_SUM_TOL = 1e-10
SPECTRAL_TOL = 1e-8
ZERO_SNAP = 1e-8
# Final re-projection shrinks eigenvalues by this extra margin so that the
# exact sparsification of near-zero forbidden entries cannot push the
# deflated spectral radius back above 1 - gamma.
PROJECTION_MARGIN = 1e-6


@dataclass
class MixingMatrix:
    """Symmetric doubly stochastic combination matrix over ``m`` agents."""

    m: int
    entries: np.ndarray
    gamma: float

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.shape != (self.m, self.m):
            raise ValueError("mixing matrix shape does not match agent count")

    @property
    def comm_edges(self):
        """Ordered pairs (k, z), k != z, with a nonzero combination weight."""
        ks, zs = np.nonzero(self.entries)
        return {(int(k), int(z)) for k, z in zip(ks, zs) if k != z}

    def validate(self):
        """Check symmetry, row sums and the spectral condition; raise on failure."""
        C = self.entries
        asym = np.abs(C - C.T).max() if self.m else 0.0
        if asym > SYMMETRY_TOL:
            raise ValueError(f"mixing matrix asymmetry {asym:.3e} exceeds {SYMMETRY_TOL}")
        row_err = np.abs(C.sum(axis=1) - 1.0).max()
        if row_err > ROW_SUM_TOL:
            raise ValueError(f"mixing matrix row-sum error {row_err:.3e} exceeds {ROW_SUM_TOL}")
        rho = deflated_spectral_radius(C)
        if rho > 1.0 - self.gamma + SPECTRAL_TOL:
            raise ValueError(
                f"deflated spectral radius {rho:.12f} exceeds 1 - gamma = {1.0 - self.gamma}")
        return self


def deflated_spectral_radius(C: np.ndarray) -> float:
    """Spectral radius of ``C - (1/m) 11^T`` for a symmetric matrix ``C``.

    One minus this value is the contraction factor of the consensus step on
    the disagreement component of the stacked parameters.
    """
    C = np.asarray(C, dtype=np.float64)
    m = C.shape[0]
    if C.shape != (m, m):
        raise ValueError("matrix must be square")
    if m and np.abs(C - C.T).max() > 1e-9:
        raise ValueError("matrix is not symmetric")
    M = (C + C.T) / 2.0 - np.full((m, m), 1.0 / m)
    vals = np.linalg.eigvalsh(M)
    return float(np.abs(vals).max()) if m else 0.0


def metropolis_weights(comm_edges, m: int) -> MixingMatrix:
    """Metropolis mixing matrix for a given symmetric communication graph.

    Off-diagonal weights are ``1 / (1 + max(deg_k, deg_z))`` on the given
    edges; each diagonal entry absorbs the remainder of its row. The graph
    must be connected, otherwise consensus cannot reach agreement and an
    error listing the components is raised.
    """
    if m <= 0:
        raise ValueError("agent count must be positive")
    adj = np.zeros((m, m), dtype=bool)
    for (k, z) in comm_edges:
        k, z = int(k), int(z)
        if not (0 <= k < m and 0 <= z < m):
            raise ValueError(f"comm edge ({k}, {z}) outside agent range")
        if k == z:
            continue
        adj[k, z] = adj[z, k] = True

    comp = np.full(m, -1)
    cid = 0
    for s in range(m):
        if comp[s] >= 0:
            continue
        stack = [s]
        comp[s] = cid
        while stack:
            u = stack.pop()
            for v in np.flatnonzero(adj[u]):
                if comp[v] < 0:
                    comp[v] = cid
                    stack.append(int(v))
        cid += 1
    if cid > 1:
        groups = [np.flatnonzero(comp == c).tolist() for c in range(cid)]
        raise ValueError(f"communication graph is disconnected; components: {groups}")

    deg = adj.sum(axis=1)
    C = np.zeros((m, m))
    ks, zs = np.nonzero(adj)
    C[ks, zs] = 1.0 / (1.0 + np.maximum(deg[ks], deg[zs]))
    np.fill_diagonal(C, 1.0 - C.sum(axis=1))
    gamma = 1.0 - deflated_spectral_radius(C)
    return MixingMatrix(m=m, entries=C, gamma=gamma).validate()


def fully_connected_mixing(m: int) -> MixingMatrix:
    """The uniform-averaging matrix; one consensus step projects exactly."""
    C = np.full((m, m), 1.0 / m)
    return MixingMatrix(m=m, entries=C, gamma=1.0)


def project_feasible(X: np.ndarray, gamma: float) -> np.ndarray:
    """Orthogonally project a matrix onto the feasible mixing set.

    The input is symmetrized, deflated on both sides by ``I - (1/m) 11^T``,
    eigendecomposed, and the eigenvalues are clipped into
    ``[-1 + gamma, 1 - gamma]`` before reassembly around the averaging
    projector. The output is symmetric, has unit row sums, and its deflated
    spectral radius is at most ``1 - gamma``.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    if X.shape != (m, m):
        raise ValueError("matrix must be square")
    pi = np.full((m, m), 1.0 / m)
    deflate = np.eye(m) - pi
    sym = (X + X.T) / 2.0
    core = deflate @ sym @ deflate
    vals, vecs = np.linalg.eigh(core)
    beta = np.clip(vals, -1.0 + gamma, 1.0 - gamma)
    return pi + (vecs * beta) @ vecs.T


def soft_threshold(x, eps: float):
    """Elementwise ``sign(x) * max(|x| - eps, 0)``."""
    return np.sign(x) * np.maximum(np.abs(x) - eps, 0.0)


@dataclass
class AdmmState:
    """Iterates and diagnostics of one mixing-matrix design solve."""

    C: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    rho: float
    gamma: float
    iteration: int
    primal_residual: float
    dual_residual: float
    primal_trace: list = field(default_factory=list)
    dual_trace: list = field(default_factory=list)
    converged: bool = False
    forbidden_violations: list = field(default_factory=list)


def design_mixing_admm(A, gamma: float, rho: float = 1.0, max_iter: int = 5000,
                       tol: float = 1e-8, rng_seed: int = 0):
    """Design a mixing matrix that avoids forbidden agent pairs.

    ``A`` is a boolean matrix marking agent pairs whose combination weight
    should be driven to zero (pairs that share no data edge). The solve
    alternates a feasible-set projection, an elementwise soft-threshold with
    threshold ``1/rho`` on the penalized entries (pass-through elsewhere),
    and the scaled multiplier update, until
    ``max(||C - Z||_F, ||Z - Z_prev||_F) <= tol`` or ``max_iter``.

    The returned matrix is the converged iterate with sub-threshold entries
    snapped to exact zeros (their mass moved to the diagonal so row sums are
    preserved bit-for-bit) after one final slightly-tightened projection.
    Forbidden entries that remain above the snap threshold are reported in
    ``AdmmState.forbidden_violations`` instead of being silently zeroed.

    Returns
    -------
    (MixingMatrix, AdmmState)
    """
    A = np.asarray(A)
    m = A.shape[0]
    if A.shape != (m, m):
        raise ValueError("forbidden matrix must be square")
    A = A.astype(bool)
    if A.diagonal().any():
        raise ValueError("forbidden matrix must have a zero diagonal")
    if (A != A.T).any():
        raise ValueError("forbidden matrix must be symmetric")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if rho <= 0:
        raise ValueError("rho must be positive")

    rng = np.random.default_rng(rng_seed)
    Z = rng.standard_normal((m, m))
    U = rng.standard_normal((m, m)) * 0.1
    C = rng.standard_normal((m, m))
    keep = ~A

    primal_trace, dual_trace = [], []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        C = project_feasible(Z - U, gamma)
        V = C + U
        Z_prev = Z
        Z = soft_threshold(V, 1.0 / rho) * A + V * keep
        U = U + C - Z
        primal = float(np.linalg.norm(C - Z))
        dual = float(np.linalg.norm(Z - Z_prev))
        primal_trace.append(primal)
        dual_trace.append(dual)
        if max(primal, dual) <= tol:
            converged = True
            break

    # Sparsify: snap tiny entries of the converged iterate, tighten the
    # projection so the final exact zeroing stays inside the spectral bound,
    # then move residual sub-threshold forbidden mass onto the diagonal.
    Z_snap = np.where(np.abs(Z) < ZERO_SNAP, 0.0, Z)
    margin = min(PROJECTION_MARGIN, (1.0 - gamma) / 2)
    C_fin = project_feasible(Z_snap, gamma + margin)
    violations = []
    for k in range(m):
        for z in range(k + 1, m):
            if not A[k, z]:
                continue
            v = C_fin[k, z]
            if abs(v) <= ZERO_SNAP:
                C_fin[k, k] += v
                C_fin[z, z] += C_fin[z, k]
                C_fin[k, z] = 0.0
                C_fin[z, k] = 0.0
            else:
                violations.append((k, z, float(v)))

    state = AdmmState(C=C_fin, Z=Z, U=U, rho=rho, gamma=gamma, iteration=it,
                      primal_residual=primal_trace[-1] if primal_trace else 0.0,
                      dual_residual=dual_trace[-1] if dual_trace else 0.0,
                      primal_trace=primal_trace, dual_trace=dual_trace,
                      converged=converged, forbidden_violations=violations)
    mixing = MixingMatrix(m=m, entries=C_fin, gamma=gamma)
    mixing.validate()
    return mixing, state


def save_mixing_csv(path, C: np.ndarray):
    """Write a dense matrix as CSV with 17 significant digits per entry."""
    C = np.asarray(C, dtype=np.float64)
    with open(path, "w") as fh:
        for row in C:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_mixing_csv(path) -> MixingMatrix:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed matrix row: {exc}") from exc
    C = np.asarray(rows, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"{path}: matrix must be square, got shape {C.shape}")
    gamma = 1.0 - deflated_spectral_radius(C)
    return MixingMatrix(m=C.shape[0], entries=C, gamma=gamma)


def save_forbidden_csv(path, A: np.ndarray):
    A = np.asarray(A).astype(int)
    with open(path, "w") as fh:
        for row in A:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def load_forbidden_csv(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            toks = line.split(",")
            if any(tok not in ("0", "1") for tok in toks):
                raise ValueError(f"{path}:{lineno}: forbidden matrix entries must be 0 or 1")
            rows.append([int(tok) for tok in toks])
    A = np.asarray(rows, dtype=bool)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{path}: matrix must be square, got shape {A.shape}")
    return A
