"""Histogram gradient-boosted regression trees with native missing values.

Feature values are quantized once per fit into at most ``max_bins`` bins per
column plus one reserved bin for missing cells.  Each tree is grown depth-wise
on the residuals of the current ensemble; at every split the missing rows are
tried on both sides and sent wherever the squared-error gain is larger.

Missing cells are encoded as NaN everywhere in this module.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit

FORMAT_HEADER = "fertgrid-ensemble"
FORMAT_VERSION = 1
MAX_BINS = 256

NUMERIC = "numeric"
BINARY = "one-hot-binary"


@dataclass
class FeatureMatrix:
    """Rows x columns of floats; NaN marks a missing cell."""

    values: np.ndarray
    columns: list[str] = field(default_factory=list)
    kinds: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("feature matrix must be two-dimensional")
        n_cols = self.values.shape[1]
        if not self.columns:
            self.columns = [f"f{j}" for j in range(n_cols)]
        if not self.kinds:
            self.kinds = [NUMERIC] * n_cols
        if len(self.columns) != n_cols or len(self.kinds) != n_cols:
            raise ValueError("column names/kinds do not match the matrix width")
        if np.isinf(self.values).any():
            raise ValueError("infinite feature values are not allowed; use NaN for missing")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def take(self, rows) -> "FeatureMatrix":
        return FeatureMatrix(self.values[rows], list(self.columns), list(self.kinds))


def as_matrix(matrix) -> FeatureMatrix:
    if isinstance(matrix, FeatureMatrix):
        return matrix
    return FeatureMatrix(np.asarray(matrix, dtype=np.float64))


@dataclass(frozen=True)
class GbdtConfig:
    max_depth: int = 5
    n_trees: int = 100
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    max_bins: int = MAX_BINS
    subsample: float = 1.0
    colsample: float = 1.0
    min_child_weight: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("max_depth", "n_trees", "min_samples_leaf", "max_bins"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_bins > MAX_BINS:
            raise ValueError(f"max_bins must be <= {MAX_BINS}")
        for name in ("subsample", "colsample"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.min_child_weight < 0:
            raise ValueError("min_child_weight must be >= 0")

    def replace(self, **changes) -> "GbdtConfig":
        params = {**self.as_dict(), **changes}
        return GbdtConfig(**params)

    def as_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "n_trees": self.n_trees,
            "learning_rate": self.learning_rate,
            "min_samples_leaf": self.min_samples_leaf,
            "max_bins": self.max_bins,
            "subsample": self.subsample,
            "colsample": self.colsample,
            "min_child_weight": self.min_child_weight,
            "seed": self.seed,
        }


@dataclass
class BinnedMatrix:
    """Per-column ascending bin edges and the bin index of every cell.

    A value ``v`` falls in bin ``b`` when ``edges[b-1] < v <= edges[b]``; column
    ``j`` has ``len(edges[j]) + 1`` value bins (none when all-missing) and its
    missing cells sit in bin ``missing_bin[j]``.
    """

    edges: list[np.ndarray]
    bins: np.ndarray
    missing_bin: np.ndarray

    @property
    def n_bins(self) -> np.ndarray:
        return self.missing_bin.copy()


def _column_edges(col: np.ndarray, max_bins: int, kind: str) -> np.ndarray:
    present = col[~np.isnan(col)]
    if present.size == 0:
        return np.empty(0)
    if kind == BINARY:
        return np.array([0.5])
    distinct = np.unique(present)
    if distinct.size <= max_bins:
        return (distinct[:-1] + distinct[1:]) / 2.0
    percentiles = np.linspace(0, 100, max_bins + 1)[1:-1]
    edges = np.percentile(present, percentiles, method="midpoint")
    edges = np.unique(edges)
    # an edge equal to the column maximum would leave an empty top bin
    return edges[edges < distinct[-1]]


def build_bins(matrix, max_bins: int = MAX_BINS) -> BinnedMatrix:
    m = as_matrix(matrix)
    if m.n_rows == 0:
        raise ValueError("no rows")
    if not 1 <= max_bins <= MAX_BINS:
        raise ValueError(f"max_bins must lie in [1, {MAX_BINS}]")
    edges = [_column_edges(m.values[:, j], max_bins, m.kinds[j]) for j in range(m.n_cols)]
    missing_bin = np.array([0 if e.size == 0 and np.isnan(m.values[:, j]).all() else e.size + 1
                            for j, e in enumerate(edges)], dtype=np.int64)
    bins = apply_bins(m.values, edges, missing_bin)
    return BinnedMatrix(edges=edges, bins=bins, missing_bin=missing_bin)


def apply_bins(values: np.ndarray, edges: Sequence[np.ndarray], missing_bin: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    out = np.empty(values.shape, dtype=np.uint16)
    for j, e in enumerate(edges):
        col = values[:, j]
        idx = np.searchsorted(e, col, side="left")
        idx[np.isnan(col)] = missing_bin[j]
        out[:, j] = idx
    return out


@dataclass
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf.

    Rows go left when ``x <= threshold``; a missing ``x`` goes left iff
    ``missing_left``.  ``cover`` counts the training rows that reached a node.
    """

    feature: np.ndarray
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def depth(self) -> int:
        def walk(node):
            if self.feature[node] < 0:
                return 0
            return 1 + max(walk(self.left[node]), walk(self.right[node]))
        return walk(0)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def expected_value(self) -> float:
        leaves = self.leaves()
        return float(np.dot(self.cover[leaves], self.value[leaves]) / self.cover[0])

    @classmethod
    def leaf(cls, value: float, cover: float) -> "Tree":
        return cls(
            feature=np.array([-1], dtype=np.int64),
            threshold=np.array([np.nan]),
            missing_left=np.array([True]),
            left=np.array([-1], dtype=np.int64),
            right=np.array([-1], dtype=np.int64),
            value=np.array([float(value)]),
            cover=np.array([float(cover)]),
        )


@dataclass
class TreeEnsemble:
    base_score: float
    trees: list[Tree]
    n_features: int
    config: GbdtConfig | None = None

    def __post_init__(self):
        self._packed = None

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def packed(self):
        """All trees concatenated into flat arrays for the compiled kernels."""
        if self._packed is None or self._packed[0] != len(self.trees):
            offsets = np.zeros(len(self.trees) + 1, dtype=np.int64)
            for t, tree in enumerate(self.trees):
                offsets[t + 1] = offsets[t] + tree.n_nodes

            def cat(attr, dtype):
                if not self.trees:
                    return np.empty(0, dtype=dtype)
                return np.concatenate([getattr(t, attr) for t in self.trees]).astype(dtype)

            arrays = (
                offsets,
                cat("feature", np.int64),
                cat("threshold", np.float64),
                cat("missing_left", np.bool_),
                cat("left", np.int64),
                cat("right", np.int64),
                cat("value", np.float64),
                cat("cover", np.float64),
            )
            self._packed = (len(self.trees), arrays)
        return self._packed[1]

    def depth(self) -> int:
        """Depth of the deepest tree (0 when every tree is a single leaf)."""
        offsets, feature, _, _, left, right, _, _ = self.packed()
        return int(_max_depth(offsets, feature, left, right))

    def smallest_child(self) -> float:
        """Fewest training rows in any child of any split (inf without splits)."""
        offsets, feature, _, _, left, right, _, cover = self.packed()
        split = np.flatnonzero(feature >= 0)
        if split.size == 0:
            return math.inf
        tree_of = np.searchsorted(offsets, split, side="right") - 1
        base = offsets[tree_of]
        return float(np.minimum(cover[base + left[split]], cover[base + right[split]]).min())

    def truncated(self, n_trees: int) -> "TreeEnsemble":
        cfg = self.config.replace(n_trees=max(n_trees, 1)) if self.config else None
        return TreeEnsemble(self.base_score, self.trees[:n_trees], self.n_features, cfg)

    def predict(self, X) -> np.ndarray:
        return predict(self, X)


# ---------------------------------------------------------------------------
# compiled kernels


# nodes with fewer rows than this skip histograms and sort their rows by bin
SMALL_NODE = 32


@njit(cache=True)
def _sort_pairs(keys, vals, n):
    # stable insertion sort of (keys, vals) by key
    for i in range(1, n):
        k = keys[i]
        v = vals[i]
        q = i - 1
        while q >= 0 and keys[q] > k:
            keys[q + 1] = keys[q]
            vals[q + 1] = vals[q]
            q -= 1
        keys[q + 1] = k
        vals[q + 1] = v


@njit(cache=True)
def _fill_hist(bins, grad, order, s0, s1, feats, n_act, hg, hn, slot):
    # accumulates into ``slot``, which must be all zero
    n_feat = bins.shape[1]
    if n_act == n_feat:
        # direct feature index keeps the inner loop free of indirection
        for p in range(s0, s1):
            r = order[p]
            g = grad[r]
            for j in range(n_feat):
                b = bins[r, j]
                hg[slot, j, b] += g
                hn[slot, j, b] += 1
    else:
        for p in range(s0, s1):
            r = order[p]
            g = grad[r]
            for a in range(n_act):
                j = feats[a]
                b = bins[r, j]
                hg[slot, j, b] += g
                hn[slot, j, b] += 1


@njit(cache=True)
def _list_bins(hn, slot, feats, n_act, missing_bin, blist, blen):
    # ascending list of the occupied bins of every active feature
    for a in range(n_act):
        j = feats[a]
        m = 0
        for b in range(missing_bin[j] + 1):
            if hn[slot, j, b] > 0:
                blist[slot, j, m] = b
                m += 1
        blen[slot, j] = m


@njit(cache=True)
def _release(hg, hn, slot, feats, n_act, blist, blen):
    # zero the occupied bins so the slot can be reused
    for a in range(n_act):
        j = feats[a]
        for q in range(blen[slot, j]):
            b = blist[slot, j, q]
            hg[slot, j, b] = 0.0
            hn[slot, j, b] = 0
        blen[slot, j] = 0


@njit(cache=True)
def _split_hist(hg, hn, parent, child, feats, n_act, blist, blen, subtract):
    """List the occupied bins of ``child`` (a subset of ``parent``'s).

    With ``subtract`` the child histogram is also removed from ``parent``,
    whose list then shrinks to the bins still occupied.
    """
    # branch-free: the occupancy tests are data dependent and mispredict often
    for a in range(n_act):
        j = feats[a]
        mc = 0
        mp = 0
        for q in range(blen[parent, j]):
            b = blist[parent, j, q]
            c = hn[child, j, b]
            blist[child, j, mc] = b
            mc += c > 0
            if subtract:
                left = hn[parent, j, b] - c
                hn[parent, j, b] = left
                keep = left > 0
                hg[parent, j, b] = (hg[parent, j, b] - hg[child, j, b]) * keep
                blist[parent, j, mp] = b
                mp += keep
        blen[child, j] = mc
        if subtract:
            blen[parent, j] = mp


@njit(cache=True)
def _gain_left_right(gl, nl, gr, nr, base_gain, inv):
    # inv[k] == 1 / k; a table lookup is much cheaper than two divisions
    return gl * gl * inv[nl] + gr * gr * inv[nr] - base_gain


@njit(cache=True)
def _scan_hist(hg, hn, slot, j, mb, blist, blen, g_tot, n_node, min_leaf, base_gain, floor, inv):
    """Best split of feature ``j`` from its histogram; gains must beat ``floor``.

    Returns ``(gain, bin, missing_left)`` with ``bin == -1`` when nothing beats it.
    """
    g_miss = hg[slot, j, mb]
    n_miss = hn[slot, j, mb]
    best_gain = floor
    best_bin = -1
    best_ml = True
    gl = 0.0
    nl = 0
    for q in range(blen[slot, j]):
        b = blist[slot, j, q]
        if b == mb:
            break
        gl += hg[slot, j, b]
        nl += hn[slot, j, b]
        gr = g_tot - g_miss - gl
        nr = n_node - n_miss - nl
        if nr + n_miss < min_leaf:
            # the right side only shrinks from here on
            break
        # missing rows to the left
        nla = nl + n_miss
        if nla >= min_leaf and nr >= min_leaf:
            gain = _gain_left_right(gl + g_miss, nla, gr, nr, base_gain, inv)
            if gain > best_gain:
                best_gain = gain
                best_bin = b
                best_ml = True
        # missing rows to the right
        if n_miss > 0:
            nrb = nr + n_miss
            if nl >= min_leaf and nrb >= min_leaf:
                gain = _gain_left_right(gl, nl, gr + g_miss, nrb, base_gain, inv)
                if gain > best_gain:
                    best_gain = gain
                    best_bin = b
                    best_ml = False
    return best_gain, best_bin, best_ml


@njit(cache=True)
def _scan_rows(bins, grad, order, s0, n_node, j, mb, keys, vals, g_tot, min_leaf, base_gain,
               floor, inv):
    """Same as ``_scan_hist`` for a small node, by sorting its rows on the bin."""
    for p in range(n_node):
        r = order[s0 + p]
        keys[p] = bins[r, j]
        vals[p] = grad[r]
    _sort_pairs(keys, vals, n_node)
    # the missing bin sorts last
    g_miss = 0.0
    n_miss = 0
    q = n_node - 1
    while q >= 0 and keys[q] == mb:
        g_miss += vals[q]
        n_miss += 1
        q -= 1
    n_val = n_node - n_miss
    best_gain = floor
    best_bin = -1
    best_ml = True
    gl = 0.0
    nl = 0
    c = 0
    while c < n_val:
        b = keys[c]
        while c < n_val and keys[c] == b:
            gl += vals[c]
            nl += 1
            c += 1
        gr = g_tot - g_miss - gl
        nr = n_node - n_miss - nl
        nla = nl + n_miss
        if nla >= min_leaf and nr >= min_leaf:
            gain = _gain_left_right(gl + g_miss, nla, gr, nr, base_gain, inv)
            if gain > best_gain:
                best_gain = gain
                best_bin = b
                best_ml = True
        if n_miss > 0:
            nrb = nr + n_miss
            if nl >= min_leaf and nrb >= min_leaf:
                gain = _gain_left_right(gl, nl, gr + g_miss, nrb, base_gain, inv)
                if gain > best_gain:
                    best_gain = gain
                    best_bin = b
                    best_ml = False
    return best_gain, best_bin, best_ml


@njit(cache=True)
def _grow_tree(bins, missing_bin, n_bins, grad, order, n_rows, feats, n_act, max_depth, min_leaf, lr,
               out_feature, out_bin, out_mleft, out_left, out_right, out_value, out_cover, base,
               hg, hn, free_slots, node_slot, start, stop, depth, stack, buf, keys, vals, inv, blist, blen,
               min_gain):
    """Grow one tree into the ``out_*`` arrays from slot ``base`` on; returns its node count.

    ``order[:n_rows]`` holds the rows of the tree and is permuted so every leaf
    owns a contiguous segment ``start[k]:stop[k]`` (node ids local to the tree).
    Nodes with at least ``SMALL_NODE`` rows keep a per-feature histogram in one
    of the ``hg``/``hn`` slots; a larger child inherits its parent's slot minus
    the histogram of its smaller sibling.
    """
    n_free = free_slots.shape[0]
    for q in range(n_free):
        free_slots[q] = q
    start[0] = 0
    stop[0] = n_rows
    depth[0] = 0
    node_slot[0] = -1
    if n_rows >= SMALL_NODE and max_depth > 0 and n_rows >= 2 * min_leaf:
        n_free -= 1
        node_slot[0] = free_slots[n_free]
        _fill_hist(bins, grad, order, 0, n_rows, feats, n_act, hg, hn, node_slot[0])
        _list_bins(hn, node_slot[0], feats, n_act, missing_bin, blist, blen)
    n_nodes = 1
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        k_out = base + node
        slot = node_slot[node]
        s0 = start[node]
        s1 = stop[node]
        n_node = s1 - s0
        g_tot = 0.0
        sq_tot = 0.0
        for p in range(s0, s1):
            gv = grad[order[p]]
            g_tot += gv
            sq_tot += gv * gv
        out_feature[k_out] = -1
        out_bin[k_out] = 0
        out_mleft[k_out] = True
        out_left[k_out] = -1
        out_right[k_out] = -1
        out_cover[k_out] = n_node
        out_value[k_out] = lr * g_tot / n_node if n_node > 0 else 0.0
        if depth[node] >= max_depth or n_node < 2 * min_leaf:
            if slot >= 0:
                _release(hg, hn, slot, feats, n_act, blist, blen)
                free_slots[n_free] = slot
                n_free += 1
            continue
        base_gain = g_tot * g_tot / n_node
        # gains at rounding-noise level, relative to the node or to the
        # initial target spread, do not justify a split
        tol = max(1e-12 * sq_tot, min_gain)
        best_gain = 0.0
        best_feat = -1
        best_bin = -1
        best_mleft = True
        for a in range(n_act):
            j = feats[a]
            if slot >= 0:
                gain, b, ml = _scan_hist(hg, hn, slot, j, missing_bin[j], blist, blen, g_tot,
                                         n_node, min_leaf, base_gain, best_gain + tol, inv)
            else:
                gain, b, ml = _scan_rows(bins, grad, order, s0, n_node, j, missing_bin[j], keys, vals,
                                         g_tot, min_leaf, base_gain, best_gain + tol, inv)
            if b >= 0:
                best_gain = gain
                best_feat = j
                best_bin = b
                best_mleft = ml
        if best_feat < 0:
            if slot >= 0:
                _release(hg, hn, slot, feats, n_act, blist, blen)
                free_slots[n_free] = slot
                n_free += 1
            continue
        # partition node rows in place, stable on both sides
        nl_cnt = 0
        nr_cnt = 0
        mb = missing_bin[best_feat]
        for p in range(s0, s1):
            r = order[p]
            b = bins[r, best_feat]
            go_left = (b == mb and best_mleft) or (b != mb and b <= best_bin)
            # write to both sides, advance one (no data-dependent branch)
            order[s0 + nl_cnt] = r
            buf[nr_cnt] = r
            nl_cnt += go_left
            nr_cnt += not go_left
        for q in range(nr_cnt):
            order[s0 + nl_cnt + q] = buf[q]
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        out_feature[k_out] = best_feat
        out_bin[k_out] = best_bin
        out_mleft[k_out] = best_mleft
        out_left[k_out] = lc
        out_right[k_out] = rc
        start[lc] = s0
        stop[lc] = s0 + nl_cnt
        start[rc] = s0 + nl_cnt
        stop[rc] = s1
        d1 = depth[node] + 1
        depth[lc] = d1
        depth[rc] = d1
        node_slot[lc] = -1
        node_slot[rc] = -1
        if slot >= 0:
            need_l = d1 < max_depth and nl_cnt >= SMALL_NODE and nl_cnt >= 2 * min_leaf
            need_r = d1 < max_depth and nr_cnt >= SMALL_NODE and nr_cnt >= 2 * min_leaf
            small, large = (lc, rc) if nl_cnt <= nr_cnt else (rc, lc)
            need_small = need_l if small == lc else need_r
            need_large = need_r if small == lc else need_l
            if need_large or need_small:
                n_free -= 1
                s_slot = free_slots[n_free]
                _fill_hist(bins, grad, order, start[small], stop[small], feats, n_act, hg, hn, s_slot)
                _split_hist(hg, hn, slot, s_slot, feats, n_act, blist, blen, need_large)
                if need_large:
                    node_slot[large] = slot
                else:
                    _release(hg, hn, slot, feats, n_act, blist, blen)
                    free_slots[n_free] = slot
                    n_free += 1
                if need_small:
                    node_slot[small] = s_slot
                else:
                    _release(hg, hn, s_slot, feats, n_act, blist, blen)
                    free_slots[n_free] = s_slot
                    n_free += 1
            else:
                _release(hg, hn, slot, feats, n_act, blist, blen)
                free_slots[n_free] = slot
                n_free += 1
        # push right first so the left subtree is expanded first
        stack[top] = rc
        stack[top + 1] = lc
        top += 2
    return n_nodes


@njit(cache=True)
def _grow(a, need):
    if need <= a.shape[0]:
        return a
    out = np.empty(max(need, 2 * a.shape[0]), dtype=a.dtype)
    out[:a.shape[0]] = a
    return out


@njit(cache=True)
def _boost(bins, missing_bin, n_bins, y, base_score, n_trees, row_sets, feat_sets,
           max_depth, min_leaf, lr):
    """Boosting loop.  ``row_sets``/``feat_sets`` have one row per tree, or a
    single row shared by every tree.  Returns per-tree node offsets and the
    concatenated node arrays (child ids local to each tree)."""
    n, n_feat = bins.shape
    n_sub = row_sets.shape[1]
    raw = np.full(n, base_score)
    grad = np.empty(n)
    spread = 0.0
    for i in range(n):
        spread += (y[i] - base_score) ** 2
    min_gain = 1e-12 * spread
    max_nb = 1
    for j in range(n_feat):
        if missing_bin[j] + 1 > max_nb:
            max_nb = missing_bin[j] + 1
    n_slots = min(max_depth, n_sub // SMALL_NODE) + 3
    hg = np.zeros((n_slots, n_feat, max_nb))
    hn = np.zeros((n_slots, n_feat, max_nb), dtype=np.int64)
    free_slots = np.empty(n_slots, dtype=np.int64)
    blist = np.empty((n_slots, n_feat, max_nb), dtype=np.int64)
    blen = np.zeros((n_slots, n_feat), dtype=np.int64)
    cap = 2 * n_sub + 1
    node_slot = np.empty(cap, dtype=np.int64)
    start = np.empty(cap, dtype=np.int64)
    stop = np.empty(cap, dtype=np.int64)
    depth = np.empty(cap, dtype=np.int64)
    stack = np.empty(cap, dtype=np.int64)
    buf = np.empty(n_sub, dtype=np.int64)
    keys = np.empty(SMALL_NODE, dtype=np.int64)
    vals = np.empty(SMALL_NODE)
    feats = np.empty(n_feat, dtype=np.int64)
    inv = np.zeros(n_sub + 1)
    for k in range(1, n_sub + 1):
        inv[k] = 1.0 / k
    order = np.empty(n_sub, dtype=np.int64)

    size = max(64, n_trees * 8)
    feature = np.empty(size, dtype=np.int64)
    split_bin = np.empty(size, dtype=np.int64)
    mleft = np.empty(size, dtype=np.bool_)
    left = np.empty(size, dtype=np.int64)
    right = np.empty(size, dtype=np.int64)
    value = np.empty(size)
    cover = np.empty(size)
    offsets = np.zeros(n_trees + 1, dtype=np.int64)
    for t in range(n_trees):
        rows = row_sets[t if row_sets.shape[0] > 1 else 0]
        feat_ok = feat_sets[t if feat_sets.shape[0] > 1 else 0]
        for i in range(n):
            grad[i] = y[i] - raw[i]
        n_act = 0
        for j in range(n_feat):
            if feat_ok[j]:
                feats[n_act] = j
                n_act += 1
        for p in range(n_sub):
            order[p] = rows[p]
        b0 = offsets[t]
        need = b0 + cap
        feature = _grow(feature, need)
        split_bin = _grow(split_bin, need)
        mleft = _grow(mleft, need)
        left = _grow(left, need)
        right = _grow(right, need)
        value = _grow(value, need)
        cover = _grow(cover, need)
        n_nodes = _grow_tree(bins, missing_bin, n_bins, grad, order, n_sub, feats, n_act,
                             max_depth, min_leaf, lr, feature, split_bin, mleft, left, right,
                             value, cover, b0, hg, hn, free_slots, node_slot, start, stop,
                             depth, stack, buf, keys, vals, inv, blist, blen, min_gain)
        offsets[t + 1] = b0 + n_nodes
        if n_sub == n:
            # leaf segments cover every row
            for k in range(n_nodes):
                if feature[b0 + k] < 0:
                    v = value[b0 + k]
                    for p in range(start[k], stop[k]):
                        raw[order[p]] += v
        else:
            for i in range(n):
                k = 0
                while feature[b0 + k] >= 0:
                    f = feature[b0 + k]
                    b = bins[i, f]
                    if b == missing_bin[f]:
                        go_left = mleft[b0 + k]
                    else:
                        go_left = b <= split_bin[b0 + k]
                    k = left[b0 + k] if go_left else right[b0 + k]
                raw[i] += value[b0 + k]
    m = offsets[n_trees]
    return (offsets, feature[:m], split_bin[:m], mleft[:m], left[:m], right[:m],
            value[:m], cover[:m])


@njit(cache=True)
def _max_depth(offsets, feature, left, right):
    # children always carry larger ids than their parent
    deepest = 0
    for t in range(offsets.shape[0] - 1):
        b0 = offsets[t]
        n_nodes = offsets[t + 1] - b0
        d = np.zeros(n_nodes, dtype=np.int64)
        for k in range(n_nodes):
            if feature[b0 + k] >= 0:
                d[left[b0 + k]] = d[k] + 1
                d[right[b0 + k]] = d[k] + 1
                deepest = max(deepest, d[k] + 1)
    return deepest


@njit(cache=True)
def _leaf_of(x, base, feature, threshold, missing_left, left, right):
    node = 0
    while feature[base + node] >= 0:
        k = base + node
        v = x[feature[k]]
        if np.isnan(v):
            go_left = missing_left[k]
        else:
            go_left = v <= threshold[k]
        node = left[k] if go_left else right[k]
    return base + node


@njit(cache=True)
def _predict_packed(X, base_score, offsets, feature, threshold, missing_left, left, right, value,
                    checkpoints):
    """Prediction after each tree count in ``checkpoints`` (ascending)."""
    n = X.shape[0]
    n_ck = checkpoints.shape[0]
    out = np.empty((n_ck, n))
    for i in range(n):
        acc = base_score
        t = 0
        for c in range(n_ck):
            while t < checkpoints[c]:
                leaf = _leaf_of(X[i], offsets[t], feature, threshold, missing_left, left, right)
                acc += value[leaf]
                t += 1
            out[c, i] = acc
    return out


# ---------------------------------------------------------------------------


def _check_targets(y, n_rows) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != n_rows:
        raise ValueError(f"got {y.shape[0]} targets for {n_rows} rows")
    if not np.isfinite(y).all():
        raise ValueError("targets must be finite")
    return y


def fit(matrix, targets, config: GbdtConfig | None = None) -> TreeEnsemble:
    """Fit a boosted ensemble of ``config.n_trees`` regression trees."""
    config = config or GbdtConfig()
    m = as_matrix(matrix)
    y = _check_targets(targets, m.n_rows)
    binned = build_bins(m, config.max_bins)
    return _fit_binned(m, binned, y, config)


def _fit_binned(m: FeatureMatrix, binned: BinnedMatrix, y: np.ndarray, config: GbdtConfig) -> TreeEnsemble:
    n, n_feat = binned.bins.shape
    base_score = float(np.mean(y))
    n_value_bins = np.array([e.size + 1 if mb > 0 else 0
                             for e, mb in zip(binned.edges, binned.missing_bin)], dtype=np.int64)
    min_leaf = max(int(config.min_samples_leaf), int(np.ceil(config.min_child_weight)), 1)
    rng = np.random.default_rng(config.seed)
    all_rows = np.arange(n, dtype=np.int64)
    all_feats = np.ones(n_feat, dtype=np.bool_)
    n_sub = max(1, int(round(config.subsample * n)))
    n_col = max(1, int(round(config.colsample * n_feat)))
    if n_sub < n:
        row_sets = np.empty((config.n_trees, n_sub), dtype=np.int64)
    else:
        row_sets = all_rows[None, :]
    feat_sets = all_feats[None, :]
    if n_col < n_feat:
        feat_sets = np.zeros((config.n_trees, n_feat), dtype=np.bool_)
    # draws interleave per tree: rows first, then columns
    for t in range(config.n_trees if (n_sub < n or n_col < n_feat) else 0):
        if n_sub < n:
            row_sets[t] = np.sort(rng.choice(n, size=n_sub, replace=False))
        if n_col < n_feat:
            feat_sets[t, rng.choice(n_feat, size=n_col, replace=False)] = True
    offsets, feature, split_bin, mleft, left, right, value, cover = _boost(
        np.ascontiguousarray(binned.bins), binned.missing_bin, n_value_bins, y, base_score, int(config.n_trees),
        row_sets, feat_sets, int(config.max_depth), min_leaf, float(config.learning_rate))
    threshold = np.full(feature.shape[0], np.nan)
    for j, e in enumerate(binned.edges):
        at = feature == j
        if at.any():
            threshold[at] = np.append(e, np.inf)[split_bin[at]]
    # trees are views into the flat arrays, which double as the packed form
    flat = (offsets, feature, threshold, mleft, left, right, value, cover)
    trees = []
    for t in range(config.n_trees):
        sl = slice(offsets[t], offsets[t + 1])
        trees.append(Tree(feature[sl], threshold[sl], mleft[sl], left[sl], right[sl], value[sl], cover[sl]))
    ensemble = TreeEnsemble(base_score, trees, n_feat, config)
    ensemble._packed = (len(trees), flat)
    return ensemble


def _as_rows(ensemble: TreeEnsemble, X) -> np.ndarray:
    if isinstance(X, FeatureMatrix):
        X = X.values
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != ensemble.n_features:
        raise ValueError(f"row has {X.shape[1]} features, ensemble expects {ensemble.n_features}")
    return np.ascontiguousarray(X)


def predict(ensemble: TreeEnsemble, X) -> np.ndarray:
    """Predict one row (1-D input gives a float) or many rows."""
    single = not isinstance(X, FeatureMatrix) and np.ndim(X) == 1
    rows = _as_rows(ensemble, X)
    out = staged_predict(ensemble, rows, [ensemble.n_trees])[0]
    return float(out[0]) if single else out


def staged_predict(ensemble: TreeEnsemble, X, checkpoints: Iterable[int]) -> np.ndarray:
    """Predictions of every tree-count prefix listed in ``checkpoints``."""
    rows = _as_rows(ensemble, X)
    ck = np.asarray(sorted(checkpoints), dtype=np.int64)
    if ck.size and (ck[0] < 0 or ck[-1] > ensemble.n_trees):
        raise ValueError("checkpoint outside the ensemble")
    offsets, feature, threshold, mleft, left, right, value, _ = ensemble.packed()
    return _predict_packed(rows, float(ensemble.base_score), offsets, feature, threshold,
                           mleft, left, right, value, ck)


# ---------------------------------------------------------------------------
# portable text format


def dumps(ensemble: TreeEnsemble) -> str:
    out = io.StringIO()
    out.write(f"{FORMAT_HEADER} v{FORMAT_VERSION}\n")
    out.write(f"n_features {ensemble.n_features}\n")
    out.write(f"base_score {ensemble.base_score!r}\n")
    if ensemble.config is not None:
        params = " ".join(f"{k}={v!r}" for k, v in ensemble.config.as_dict().items())
        out.write(f"config {params}\n")
    out.write(f"n_trees {ensemble.n_trees}\n")
    for t, tree in enumerate(ensemble.trees):
        out.write(f"tree {t} {tree.n_nodes}\n")
        # preorder: feature threshold missing_left left right value cover
        for k in _preorder(tree):
            out.write(
                f"{k} {int(tree.feature[k])} {float(tree.threshold[k])!r} "
                f"{int(bool(tree.missing_left[k]))} {int(tree.left[k])} {int(tree.right[k])} "
                f"{float(tree.value[k])!r} {float(tree.cover[k])!r}\n"
            )
    return out.getvalue()


def _preorder(tree: Tree) -> list[int]:
    order, stack = [], [0]
    while stack:
        k = stack.pop()
        order.append(k)
        if tree.feature[k] >= 0:
            stack.append(int(tree.right[k]))
            stack.append(int(tree.left[k]))
    return order


def loads(text: str) -> TreeEnsemble:
    lines = iter(text.splitlines())
    head = next(lines).split()
    if head[0] != FORMAT_HEADER or head[1] != f"v{FORMAT_VERSION}":
        raise ValueError(f"not a {FORMAT_HEADER} v{FORMAT_VERSION} document")
    n_features = int(next(lines).split()[1])
    base_score = float(next(lines).split()[1])
    line = next(lines)
    config = None
    if line.startswith("config "):
        params = dict(kv.split("=", 1) for kv in line.split()[1:])
        fields = GbdtConfig().as_dict()
        config = GbdtConfig(**{k: type(fields[k])(float(v)) if isinstance(fields[k], int)
                               else float(v) for k, v in params.items()})
        line = next(lines)
    n_trees = int(line.split()[1])
    trees = []
    for _ in range(n_trees):
        _, _, n_nodes = next(lines).split()
        n_nodes = int(n_nodes)
        cols = {name: [None] * n_nodes for name in
                ("feature", "threshold", "missing_left", "left", "right", "value", "cover")}
        for _ in range(n_nodes):
            k, f, thr, ml, lc, rc, val, cov = next(lines).split()
            k = int(k)
            cols["feature"][k] = int(f)
            cols["threshold"][k] = float(thr)
            cols["missing_left"][k] = ml == "1"
            cols["left"][k] = int(lc)
            cols["right"][k] = int(rc)
            cols["value"][k] = float(val)
            cols["cover"][k] = float(cov)
        trees.append(Tree(
            feature=np.array(cols["feature"], dtype=np.int64),
            threshold=np.array(cols["threshold"], dtype=np.float64),
            missing_left=np.array(cols["missing_left"], dtype=np.bool_),
            left=np.array(cols["left"], dtype=np.int64),
            right=np.array(cols["right"], dtype=np.int64),
            value=np.array(cols["value"], dtype=np.float64),
            cover=np.array(cols["cover"], dtype=np.float64),
        ))
    return TreeEnsemble(base_score, trees, n_features, config)


def save(ensemble: TreeEnsemble, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(ensemble))


def load(path) -> TreeEnsemble:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
