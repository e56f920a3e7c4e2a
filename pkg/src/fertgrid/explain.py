"""Exact path-dependent TreeSHAP, one-hot group aggregation and mean-|SHAP| ranking.

Node covers (training rows reaching a node) stand in for the background
distribution, so no reference dataset is needed.  A missing value follows the
direction stored at the split, exactly as in prediction.
"""
from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from .gbdt import TreeEnsemble, _as_rows


@dataclass
class ShapVector:
    values: np.ndarray  # one attribution per column (or group)
    base_value: float
    names: tuple[str, ...] | None = None

    def total(self) -> float:
        return float(self.base_value + self.values.sum())


@dataclass
class ShapMatrix:
    """Attributions for many rows; ``values[i]`` explains row ``i``."""

    values: np.ndarray
    base_value: float
    names: tuple[str, ...]

    def row(self, i: int) -> ShapVector:
        return ShapVector(self.values[i].copy(), self.base_value, self.names)


# ---------------------------------------------------------------------------
# compiled kernel


@njit(cache=True)
def _extend(pd, pz, po, pw, ud, zero, one, feat):
    # append (feat, zero, one) at index ud and update the permutation weights
    pd[ud] = feat
    pz[ud] = zero
    po[ud] = one
    pw[ud] = 1.0 if ud == 0 else 0.0
    for i in range(ud - 1, -1, -1):
        pw[i + 1] += one * pw[i] * (i + 1) / (ud + 1)
        pw[i] = zero * pw[i] * (ud - i) / (ud + 1)


@njit(cache=True)
def _unwind(pd, pz, po, pw, ud, k):
    # remove element k from a path whose last index is ud
    one = po[k]
    zero = pz[k]
    nxt = pw[ud]
    for i in range(ud - 1, -1, -1):
        if one != 0.0:
            t = pw[i]
            pw[i] = nxt * (ud + 1) / ((i + 1) * one)
            nxt = t - pw[i] * zero * (ud - i) / (ud + 1)
        else:
            pw[i] = pw[i] * (ud + 1) / (zero * (ud - i))
    for i in range(k, ud):
        pd[i] = pd[i + 1]
        pz[i] = pz[i + 1]
        po[i] = po[i + 1]


@njit(cache=True)
def _unwound_sum(pz, po, pw, ud, k):
    # total permutation weight of the path with element k taken out
    one = po[k]
    zero = pz[k]
    total = 0.0
    if one != 0.0:
        nxt = pw[ud]
        for i in range(ud - 1, -1, -1):
            t = nxt / ((i + 1) * one)
            total += t
            nxt = pw[i] - t * zero * (ud - i)
    else:
        for i in range(ud - 1, -1, -1):
            total += pw[i] / (zero * (ud - i))
    return total * (ud + 1)


@njit(cache=True)
def _tree_shap(x, b0, n_nodes, feature, threshold, missing_left, left, right, value, cover, phi,
               pd, pz, po, pw, st_node, st_ud, st_zero, st_one, st_feat, st_level):
    # explicit DFS; row L of the path buffers belongs to the node on level L
    top = 0
    st_node[0] = 0
    st_ud[0] = 0
    st_zero[0] = 1.0
    st_one[0] = 1.0
    st_feat[0] = -1
    st_level[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = st_node[top]
        ud = st_ud[top]
        lev = st_level[top]
        if lev > 0:
            for i in range(ud):
                pd[lev, i] = pd[lev - 1, i]
                pz[lev, i] = pz[lev - 1, i]
                po[lev, i] = po[lev - 1, i]
                pw[lev, i] = pw[lev - 1, i]
        _extend(pd[lev], pz[lev], po[lev], pw[lev], ud, st_zero[top], st_one[top], st_feat[top])
        k = b0 + node
        f = feature[k]
        if f < 0:
            v = value[k]
            for i in range(1, ud + 1):
                w = _unwound_sum(pz[lev], po[lev], pw[lev], ud, i)
                phi[pd[lev, i]] += w * (po[lev, i] - pz[lev, i]) * v
            continue
        xv = x[f]
        if np.isnan(xv):
            go_left = missing_left[k]
        else:
            go_left = xv <= threshold[k]
        hot = left[k] if go_left else right[k]
        cold = right[k] if go_left else left[k]
        w_node = cover[k]
        hot_zero = cover[b0 + hot] / w_node
        cold_zero = cover[b0 + cold] / w_node
        in_zero = 1.0
        in_one = 1.0
        for i in range(ud + 1):
            if pd[lev, i] == f:
                in_zero = pz[lev, i]
                in_one = po[lev, i]
                _unwind(pd[lev], pz[lev], po[lev], pw[lev], ud, i)
                ud -= 1
                break
        # cold first so the hot subtree is walked first
        st_node[top] = cold
        st_ud[top] = ud + 1
        st_zero[top] = cold_zero * in_zero
        st_one[top] = 0.0
        st_feat[top] = f
        st_level[top] = lev + 1
        st_node[top + 1] = hot
        st_ud[top + 1] = ud + 1
        st_zero[top + 1] = hot_zero * in_zero
        st_one[top + 1] = in_one
        st_feat[top + 1] = f
        st_level[top + 1] = lev + 1
        top += 2


@njit(cache=True, nogil=True)
def _shap_rows(X, offsets, feature, threshold, missing_left, left, right, value, cover, max_depth):
    n, n_feat = X.shape
    out = np.zeros((n, n_feat))
    size = max_depth + 2
    pd = np.zeros((size, size), dtype=np.int64)
    pz = np.zeros((size, size))
    po = np.zeros((size, size))
    pw = np.zeros((size, size))
    cap = 2 * size + 2
    st_node = np.empty(cap, dtype=np.int64)
    st_ud = np.empty(cap, dtype=np.int64)
    st_zero = np.empty(cap)
    st_one = np.empty(cap)
    st_feat = np.empty(cap, dtype=np.int64)
    st_level = np.empty(cap, dtype=np.int64)
    # the path's root element (feature -1) is never credited; index 0 is skipped
    phi = np.zeros(n_feat + 1)
    for r in range(n):
        phi[:] = 0.0
        for t in range(offsets.shape[0] - 1):
            b0 = offsets[t]
            _tree_shap(X[r], b0, offsets[t + 1] - b0, feature, threshold, missing_left, left, right,
                       value, cover, phi, pd, pz, po, pw, st_node, st_ud, st_zero, st_one, st_feat,
                       st_level)
        out[r] = phi[:n_feat]
    return out


# ---------------------------------------------------------------------------


def expected_value(ensemble: TreeEnsemble) -> float:
    """Cover-weighted mean prediction: the base value of every explanation."""
    return float(ensemble.base_score + sum(t.expected_value() for t in ensemble.trees))


def _check_covers(ensemble: TreeEnsemble) -> None:
    for t, tree in enumerate(ensemble.trees):
        if not (tree.cover > 0).all():
            raise ValueError(f"tree {t} has a node without training cover")


def shap_values(ensemble: TreeEnsemble, X, names: Sequence[str] | None = None,
                workers: int = 1) -> ShapMatrix:
    """Path-dependent TreeSHAP for every row of ``X``.

    ``workers > 1`` splits the rows into chunks explained on a thread pool;
    the result does not depend on the worker count.
    """
    rows = _as_rows(ensemble, X)
    _check_covers(ensemble)
    packed = ensemble.packed()
    depth = ensemble.depth()
    run = lambda chunk: _shap_rows(chunk, *packed, depth)
    if workers > 1 and rows.shape[0] > 1:
        chunks = np.array_split(rows, min(workers * 4, rows.shape[0]))
        with ThreadPoolExecutor(workers) as pool:
            phi = np.concatenate(list(pool.map(run, chunks)))
    else:
        phi = run(rows)
    if names is None:
        names = tuple(f"x{j}" for j in range(ensemble.n_features))
    return ShapMatrix(phi, expected_value(ensemble), tuple(names))


def tree_shap(ensemble: TreeEnsemble, row, names: Sequence[str] | None = None) -> ShapVector:
    """Attributions of a single row; ``base_value + sum(values)`` equals the prediction."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError("tree_shap explains one row; use shap_values for a matrix")
    return shap_values(ensemble, row[None, :], names).row(0)


# ---------------------------------------------------------------------------
# grouping and ranking


@dataclass(frozen=True)
class FeatureGrouping:
    """Encoded column index -> original feature name (one-hot columns share one)."""

    group_of: tuple[str, ...]

    @classmethod
    def identity(cls, names: Sequence[str]) -> "FeatureGrouping":
        return cls(tuple(names))

    @classmethod
    def from_columns(cls, columns: Sequence[str], families: Mapping[str, Sequence[str]]) -> "FeatureGrouping":
        """``families`` maps a feature name to its encoded columns; other columns stand alone."""
        owner = {}
        for name, cols in families.items():
            for c in cols:
                if c in owner:
                    raise ValueError(f"column {c!r} belongs to {owner[c]!r} and {name!r}")
                owner[c] = name
        return cls(tuple(owner.get(c, c) for c in columns))

    @property
    def groups(self) -> tuple[str, ...]:
        # first-appearance order
        return tuple(dict.fromkeys(self.group_of))

    def matrix(self) -> np.ndarray:
        """0/1 matrix mapping columns (rows) onto groups (columns)."""
        groups = self.groups
        index = {g: i for i, g in enumerate(groups)}
        m = np.zeros((len(self.group_of), len(groups)))
        for c, g in enumerate(self.group_of):
            m[c, index[g]] = 1.0
        return m


def aggregate_groups(shap, grouping: FeatureGrouping):
    """Sum member attributions per group; the base value is untouched."""
    values = shap.values
    n_cols = values.shape[-1]
    if len(grouping.group_of) != n_cols:
        raise ValueError(f"grouping covers {len(grouping.group_of)} columns, attributions have {n_cols}")
    summed = values @ grouping.matrix()
    if isinstance(shap, ShapMatrix):
        return ShapMatrix(summed, shap.base_value, grouping.groups)
    return ShapVector(summed, shap.base_value, grouping.groups)


def importance_ranking(shap_matrix, names: Sequence[str] | None = None,
                       top_k: int | None = None) -> list[tuple[str, float]]:
    """(name, mean |phi|) pairs, most important first; ties keep column order."""
    if isinstance(shap_matrix, ShapMatrix):
        names = names or shap_matrix.names
        shap_matrix = shap_matrix.values
    values = np.atleast_2d(np.asarray(shap_matrix, dtype=np.float64))
    if values.size == 0:
        raise ValueError("empty SHAP matrix")
    if names is None:
        names = [f"x{j}" for j in range(values.shape[1])]
    if len(names) != values.shape[1]:
        raise ValueError("one name per column expected")
    imp = np.abs(values).mean(axis=0)
    order = np.argsort(-imp, kind="stable")
    ranked = [(names[j], float(imp[j])) for j in order]
    return ranked[:top_k] if top_k is not None else ranked


def beeswarm_points(shap: ShapMatrix, X) -> list[tuple[int, str, float, float]]:
    """(row, feature, phi, feature value) tuples for external plotting."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape != shap.values.shape:
        raise ValueError("feature matrix and attributions differ in shape")
    n, m = X.shape
    return [(i, shap.names[j], float(shap.values[i, j]), float(X[i, j]))
            for i in range(n) for j in range(m)]


def format_shap_matrix(shap: ShapMatrix, sep: str = "\t", row_ids: Sequence | None = None,
                       header: Sequence[str] = ()) -> str:
    """Delimiter-separated attributions, one row per explained record.

    ``header`` lines are written first, each prefixed by ``#``.
    """
    out = io.StringIO()
    for line in header:
        out.write(f"# {line}\n")
    out.write(f"# base_value{sep}{shap.base_value!r}\n")
    out.write(sep.join(["row", *shap.names]) + "\n")
    ids = row_ids if row_ids is not None else range(shap.values.shape[0])
    for rid, vals in zip(ids, shap.values):
        out.write(sep.join([str(rid), *(repr(float(v)) for v in vals)]) + "\n")
    return out.getvalue()


def format_ranking(ranking: Sequence[tuple[str, float]], categories: Mapping[str, str] | None = None,
                   sep: str = "\t") -> str:
    """Ranking table with each feature's category (environmental, agrological, ...)."""
    categories = categories or {}
    lines = [sep.join(["rank", "feature", "category", "mean_abs_shap"])]
    for i, (name, imp) in enumerate(ranking, start=1):
        lines.append(sep.join([str(i), name, categories.get(name, "unknown"), f"{imp:.6g}"]))
    return "\n".join(lines) + "\n"
