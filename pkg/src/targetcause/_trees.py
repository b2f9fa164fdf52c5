"""Histogram-based regression trees used by the forest and boosting learners.

Features are quantized to at most ``max_bins`` codes per column; trees are
grown breadth-first and, for forests, simultaneously across all trees so the
inner loop is a handful of ``bincount`` calls per depth level instead of a
Python recursion per node.  Split quality is the usual variance-reduction
score written in sufficient-statistic form, which doubles as the Newton gain
for boosting when per-sample gradients and hessians are supplied.
"""

from __future__ import annotations

import numpy as np


def bin_columns(x: np.ndarray, max_bins: int = 32):
    """Quantize columns of ``x`` to integer codes.

    Returns ``(codes, edges)`` where ``edges[j]`` is the sorted array of cut
    values for column ``j`` and ``codes[:, j] = searchsorted(edges[j], x[:, j],
    'right') - 1`` clipped to the valid range.  Columns with few distinct
    values keep them all; continuous columns use quantile cuts.
    """
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    codes = np.zeros((n, p), dtype=np.int64)
    edges = []
    for j in range(p):
        u = np.unique(x[:, j])
        if u.size > max_bins:
            q = np.quantile(x[:, j], np.linspace(0.0, 1.0, max_bins))
            u = np.unique(q)
        edges.append(u)
        codes[:, j] = apply_bins_column(x[:, j], u)
    return codes, edges


def apply_bins_column(col: np.ndarray, edges_j: np.ndarray) -> np.ndarray:
    c = np.searchsorted(edges_j, col, side="right") - 1
    return np.clip(c, 0, edges_j.size - 1)


def apply_bins(x: np.ndarray, edges) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    codes = np.zeros(x.shape, dtype=np.int64)
    for j, e in enumerate(edges):
        codes[:, j] = apply_bins_column(x[:, j], e)
    return codes


class TreeEnsemble:
    """Heap-indexed forest: ``feat[t, g] < 0`` marks node ``g`` as a leaf."""

    __slots__ = ("feat", "split", "value", "n_levels")

    def __init__(self, feat, split, value, n_levels):
        self.feat = feat
        self.split = split
        self.value = value
        self.n_levels = n_levels

    def predict_sum(self, codes: np.ndarray) -> np.ndarray:
        """Sum of per-tree leaf values for each row of ``codes``."""
        n_trees = self.feat.shape[0]
        m = codes.shape[0]
        t_col = np.arange(n_trees)[:, None]
        r_row = np.arange(m)[None, :]
        pos = np.zeros((n_trees, m), dtype=np.int64)
        for _ in range(self.n_levels):
            f = self.feat[t_col, pos]
            interior = f >= 0
            if not interior.any():
                break
            c = codes[r_row, np.maximum(f, 0)]
            s = self.split[t_col, pos]
            pos = np.where(interior, 2 * pos + 1 + (c > s), pos)
        return self.value[t_col, pos].sum(axis=0)

    def predict_mean(self, codes: np.ndarray) -> np.ndarray:
        return self.predict_sum(codes) / self.feat.shape[0]


def grow_trees(
    code_list,
    grad: np.ndarray,
    hess: np.ndarray | None,
    max_depth: int,
    min_leaf_hess: float,
    mtry: int | None,
    rng: np.random.Generator | None,
) -> tuple[TreeEnsemble, np.ndarray]:
    """Grow ``T`` trees breadth-first on pre-gathered binned samples.

    Parameters
    ----------
    code_list : list of p (T, n) or broadcastable (1, n) integer arrays.
    grad, hess : (T, n) per-sample sufficient statistics.  Pass ``hess=None``
        for plain regression trees (unit hessians); leaf values are then
        in-leaf means.  For Newton boosting pass the loss gradient/hessian.
        Zero-hessian samples are inert, which is how batched cross-validation
        masks out held-out rows.
    min_leaf_hess : minimum hessian mass per child (sample count when the
        hessian is all ones); a scalar or one value per tree.
    mtry : number of candidate features per node, or None for all.
    rng : required when ``mtry`` restricts features.

    Returns the ensemble and the (T, n) array of final leaf positions of the
    training samples (heap-global indices), which lets boosting update its
    running predictions without a prediction pass.
    """
    p = len(code_list)
    n_trees, n = grad.shape
    nb = max(int(c.max()) for c in code_list) + 1
    if nb < 2:
        max_depth = 0                                 # all features constant
    max_nodes = 2 ** (max_depth + 1) - 1
    feat = np.full((n_trees, max_nodes), -1, dtype=np.int64)
    split = np.zeros((n_trees, max_nodes), dtype=np.int64)
    value = np.zeros((n_trees, max_nodes), dtype=np.float64)

    t_col = np.arange(n_trees)[:, None]
    final_pos = np.zeros((n_trees, n), dtype=np.int64)
    active = np.ones((n_trees, n), dtype=bool)
    gflat = np.ascontiguousarray(grad).ravel()
    hflat = None if hess is None else np.ascontiguousarray(hess).ravel()
    eps = 1e-12

    # ``key`` is (tree * n_nodes + local_node) * nb, updated incrementally;
    # retired samples sit in a per-level sink slot that doubles in lockstep.
    key = np.repeat(t_col * nb, n, axis=1)

    for depth in range(max_depth + 1):
        n_nodes = 1 << depth
        base = n_nodes - 1
        dump = n_trees * n_nodes
        length = (dump + 1) * nb
        last = depth == max_depth

        n_feat = 1 if last else p
        hist_g = np.empty((n_feat, dump, nb))
        hist_h = np.empty((n_feat, dump, nb))
        for j in range(n_feat):
            bflat = (key + code_list[j]).ravel()
            hist_g[j] = np.bincount(bflat, weights=gflat, minlength=length)[: dump * nb].reshape(dump, nb)
            if hflat is None:
                hist_h[j] = np.bincount(bflat, minlength=length)[: dump * nb].reshape(dump, nb)
            else:
                hist_h[j] = np.bincount(bflat, weights=hflat, minlength=length)[: dump * nb].reshape(dump, nb)

        node_g = hist_g[0].sum(axis=-1).reshape(n_trees, n_nodes)
        node_h = hist_h[0].sum(axis=-1).reshape(n_trees, n_nodes)
        visited = node_h > 0
        vals = np.where(visited, node_g / np.maximum(node_h, eps), 0.0)
        value[:, base : base + n_nodes] = vals
        local = key // nb - t_col * n_nodes     # per-sample local node; sink rows exceed range
        if last:
            final_pos[active] = (base + local)[active]
            break

        # Left-child statistics for a split at bin s are cumulative sums;
        # right child follows by subtraction from the node totals.
        cg = np.cumsum(hist_g, axis=-1)[..., :-1]
        ch = np.cumsum(hist_h, axis=-1)[..., :-1]
        tg = hist_g.sum(axis=-1, keepdims=True)
        th = hist_h.sum(axis=-1, keepdims=True)
        rg = tg - cg
        rh = th - ch
        if np.ndim(min_leaf_hess) == 0:
            floor = min_leaf_hess
        else:
            floor = np.repeat(np.asarray(min_leaf_hess, dtype=float), n_nodes)[None, :, None]
        ok = (ch >= floor) & (rh >= floor)
        score = np.where(
            ok,
            cg * cg / np.maximum(ch, eps) + rg * rg / np.maximum(rh, eps),
            -np.inf,
        )
        feat_best = score.max(axis=-1).reshape(p, n_trees, n_nodes)
        bin_best = score.argmax(axis=-1).reshape(p, n_trees, n_nodes)
        if mtry is not None and mtry < p:
            u = rng.random((n_trees, n_nodes, p))
            kth = np.partition(u, mtry - 1, axis=-1)[..., mtry - 1 : mtry]
            allowed = (u <= kth).transpose(2, 0, 1)
            feat_best = np.where(allowed, feat_best, -np.inf)
        best_j = feat_best.argmax(axis=0)
        best_score = feat_best.max(axis=0)
        best_bin = np.take_along_axis(bin_best, best_j[None], axis=0)[0]

        parent_score = np.where(visited, node_g * node_g / np.maximum(node_h, eps), 0.0)
        improvement = best_score - parent_score
        do_split = visited & np.isfinite(best_score) & (
            improvement > 1e-10 * (np.abs(parent_score) + eps)
        )
        feat[:, base : base + n_nodes] = np.where(do_split, best_j, -1)
        split[:, base : base + n_nodes] = np.where(do_split, best_bin, 0)

        # One packed gather resolves split flag, feature and bin per sample.
        packed = (do_split.astype(np.int64) * p + np.maximum(best_j, 0)) * nb + best_bin
        pk = packed[t_col, np.minimum(local, n_nodes - 1)]
        sample_split = active & (pk >= p * nb)
        retiring = active & ~sample_split
        if retiring.any():
            final_pos[retiring] = (base + local)[retiring]
        active = sample_split
        if not active.any():
            break                                # nothing split; all samples placed
        sb = pk % nb
        jb = (pk // nb) % p
        go_right = np.zeros((n_trees, n), dtype=np.int64)
        for j in range(p):
            go_right += (jb == j) * (code_list[j] > sb)
        go_right[~active] = 0
        key = 2 * key + go_right * nb
        key[retiring] = 2 * dump * nb

    return TreeEnsemble(feat, split, value, max_depth + 1), final_pos


def grow_forest(codes, y, n_trees, max_depth, min_leaf, mtry, rng):
    """Bagged regression trees; returns the ensemble (mean-aggregated)."""
    n, p = codes.shape
    rows = rng.integers(0, n, size=(n_trees, n))
    code_list = [np.ascontiguousarray(codes[:, j])[rows] for j in range(p)]
    yb = np.asarray(y, dtype=float)[rows]
    ens, _ = grow_trees(code_list, yb, None, max_depth, float(min_leaf), mtry, rng)
    return ens


def grow_boost(codes, y, family, n_rounds, learning_rate, max_depth, min_leaf=5):
    """Stagewise Newton boosting on the squared-error or Bernoulli loss.

    ``min_leaf`` floors the per-child hessian mass at ``min_leaf`` times the
    mean per-sample hessian, i.e. an effective-sample-size leaf bound.
    Returns ``(f0, ensemble)`` where the ensemble holds one tree per round
    and predictions are ``f0 + rate * sum(tree values)``.
    """
    y = np.asarray(y, dtype=float)
    n, p = codes.shape
    code_list = [np.ascontiguousarray(codes[:, j]).reshape(1, n) for j in range(p)]
    if family == "binomial":
        p0 = min(max(float(np.mean(y)), 1e-6), 1.0 - 1e-6)
        f0 = float(np.log(p0 / (1.0 - p0)))
    else:
        f0 = float(np.mean(y))
    f = np.full(n, f0)

    feats, splits, values = [], [], []
    for _ in range(n_rounds):
        if family == "binomial":
            prob = 1.0 / (1.0 + np.exp(-np.clip(f, -30.0, 30.0)))
            grad = y - prob
            hess = np.maximum(prob * (1.0 - prob), 1e-9)
            floor = min_leaf * float(hess.mean())
            hess = hess[None, :]
        else:
            grad = y - f
            hess = None
            floor = float(min_leaf)
        ens, pos = grow_trees(code_list, grad[None, :], hess, max_depth, floor, None, None)
        f = f + learning_rate * ens.value[0, pos[0]]
        feats.append(ens.feat[0])
        splits.append(ens.split[0])
        values.append(ens.value[0])

    ens = TreeEnsemble(
        np.asarray(feats), np.asarray(splits), np.asarray(values), max_depth + 1
    )
    return f0, ens
