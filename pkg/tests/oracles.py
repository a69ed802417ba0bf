"""Independent reference implementations used only by the test suite.

These deliberately avoid the library's recurrence-based evaluation: layer
outputs are assembled from explicitly computed shift-polynomial matrices,
and gradients come from central finite differences of the loss. They are
slow but structurally unrelated to the code under test.
"""

import numpy as np

from dgcn.gcn import masked_loss


def _poly_matrices(D, order, basis, bound):
    """[poly_0(D), ..., poly_P(D)] as dense matrices."""
    n = D.shape[0]
    mats = [np.eye(n)]
    if basis == "monomial":
        for _ in range(order):
            mats.append(D @ mats[-1])
        return mats
    Ds = D / bound
    if order >= 1:
        mats.append(Ds.copy())
    for p in range(2, order + 1):
        mats.append(2.0 * Ds @ mats[-1] - mats[-2])
    return mats


def naive_block_forward(D_dense, X, assign, banks):
    """Layer stack evaluated term by term with per-agent row transforms."""
    specs = banks[0].specs
    bound = max(np.abs(D_dense).sum(axis=1).max(), 0.0) or 1.0
    H = np.asarray(X, dtype=np.float64)
    for li, spec in enumerate(specs):
        mats = _poly_matrices(D_dense, spec.order, spec.basis, bound)
        pre = np.zeros((H.shape[0], spec.out_dim))
        for p in range(spec.order + 1):
            xt = np.empty((H.shape[0], spec.out_dim))
            for k in range(len(banks)):
                rows = np.flatnonzero(assign == k)
                xt[rows] = H[rows] @ banks[k].layers[li][p]
            pre += mats[p] @ xt
        if spec.activation == "relu":
            H = np.maximum(pre, 0.0)
        elif spec.activation == "identity":
            H = pre
        else:
            e = np.exp(pre - pre.max(axis=1, keepdims=True))
            H = e / e.sum(axis=1, keepdims=True)
    return H


def naive_loss(D_dense, X, assign, banks, labels, mask, kind):
    out = naive_block_forward(D_dense, X, assign, banks)
    return masked_loss(out, labels, mask, kind)


def fd_block_grads(D_dense, X, assign, banks, labels, mask, kind,
                   h=1e-6, coords=None, rng=None):
    """Central finite differences of the global loss w.r.t. agent weights.

    Returns per-agent flat gradient arrays. ``coords`` limits the check to a
    random subset of coordinates per agent (the untouched ones are NaN).
    """
    from dgcn.gcn import ParamBank

    specs = banks[0].specs
    grads = []
    for k in range(len(banks)):
        flat = banks[k].flatten()
        g = np.full(flat.size, np.nan)
        if coords is None:
            idxs = range(flat.size)
        else:
            idxs = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        for i in idxs:
            bumped = list(banks)
            plus = flat.copy()
            plus[i] += h
            bumped[k] = ParamBank.from_flat(specs, plus)
            lp = naive_loss(D_dense, X, assign, bumped, labels, mask, kind)
            minus = flat.copy()
            minus[i] -= h
            bumped[k] = ParamBank.from_flat(specs, minus)
            lm = naive_loss(D_dense, X, assign, bumped, labels, mask, kind)
            g[i] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    """Max absolute difference scaled by the reference magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)


def rel_err_masked(a, b):
    """Like rel_err but ignores NaN coordinates in the reference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ok = ~np.isnan(b)
    if not ok.any():
        return 0.0
    denom = max(np.abs(b[ok]).max(), 1e-12)
    return float(np.abs(a[ok] - b[ok]).max() / denom)
