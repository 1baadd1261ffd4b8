"""Quantile regression forest built from CART regression trees.

Each tree is grown on a bootstrap sample and keeps the bootstrap indices
that end up in every leaf. At prediction time the leaves reached by a query
define weights over the training targets, and the conditional quantile is
read off the weighted empirical CDF.

Randomness comes from SplitMix64 streams seeded by ``(seed, tree index)``
inside the compiled tree builder, so a forest is bit-for-bit reproducible
regardless of numpy version, thread count or tree build order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numba as nb
import numpy as np

from .core import InsufficientDataError, SampleMatrix

FORMAT_VERSION = 1

# cumulative weight may undershoot an exactly attained level by rounding
_CDF_TOL = 1e-12


@dataclass(frozen=True)
class QrfParams:
    n_trees: int = 200
    min_leaf: int = 5
    mtry: int | None = None  # None -> ceil(width / 3)
    max_depth: int | None = None
    seed: int = 0
    quantile: float = 0.5

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if not 0 < self.quantile < 1:
            raise ValueError("quantile must lie in (0, 1)")

    def resolve_mtry(self, width: int) -> int:
        mtry = math.ceil(width / 3) if self.mtry is None else self.mtry
        if mtry > width:
            raise ValueError(f"mtry={mtry} exceeds feature width {width}")
        return max(mtry, 1)


@dataclass(frozen=True, eq=False)
class QrfTree:
    """Node arrays of one tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_start: np.ndarray
    leaf_count: np.ndarray
    samples: np.ndarray  # bootstrap indices grouped by leaf

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def leaf_samples(self, node: int) -> np.ndarray:
        s = self.leaf_start[node]
        return self.samples[s:s + self.leaf_count[node]]

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)


@dataclass(frozen=True, eq=False)
class QrfModel:
    trees: tuple[QrfTree, ...]
    target: np.ndarray
    width: int
    params: QrfParams
    feature_names: tuple[str, ...] = ()

    @cached_property
    def _flat(self):
        node_off = np.cumsum([0] + [t.n_nodes for t in self.trees]).astype(np.int64)
        samp_off = np.cumsum([0] + [len(t.samples) for t in self.trees]).astype(np.int64)
        cat = lambda name: np.concatenate([getattr(t, name) for t in self.trees])  # noqa: E731
        rank = np.empty(len(self.target), dtype=np.int64)
        order = np.argsort(self.target, kind="stable")
        rank[order] = np.arange(len(order))
        return dict(
            feature=cat("feature"), threshold=cat("threshold"), left=cat("left"),
            right=cat("right"), leaf_start=cat("leaf_start"), leaf_count=cat("leaf_count"),
            samples=cat("samples"), node_off=node_off, samp_off=samp_off, order=order, rank=rank,
        )


# --- compiled kernels -------------------------------------------------------

@nb.njit(cache=True)
def _mix(state):
    z = state
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def _next(state):
    """Advance a one-element SplitMix64 state and return the next output."""
    state[0] = state[0] + np.uint64(0x9E3779B97F4A7C15)
    return _mix(state[0])


@nb.njit(cache=True)
def _below(state, n):
    return np.int64(_next(state) % np.uint64(n))


@nb.njit(cache=True, nogil=True)
def _grow(X, y, seed, tree_index, mtry, min_leaf, max_depth):
    n, p = X.shape
    state = np.empty(1, dtype=np.uint64)
    state[0] = _mix(np.uint64(seed) ^ _mix(np.uint64(tree_index) + np.uint64(0x9E3779B97F4A7C15)))

    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        idx[i] = _below(state, n)

    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap, dtype=np.float64)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    leaf_start = np.zeros(cap, dtype=np.int64)
    leaf_count = np.zeros(cap, dtype=np.int64)

    st_node = np.empty(cap, dtype=np.int64)
    st_lo = np.empty(cap, dtype=np.int64)
    st_hi = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    sp = 0
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    st_depth[0] = 0
    sp = 1
    n_nodes = 1

    feats = np.arange(p)
    vals = np.empty(n, dtype=np.float64)
    buf = np.empty(n, dtype=np.int64)

    while sp > 0:
        sp -= 1
        node = st_node[sp]
        lo = st_lo[sp]
        hi = st_hi[sp]
        depth = st_depth[sp]
        m = hi - lo
        leaf_start[node] = lo
        leaf_count[node] = m
        if m < 2 * min_leaf:
            continue
        if max_depth >= 0 and depth >= max_depth:
            continue
        ymin = y[idx[lo]]
        ymax = ymin
        tot = 0.0
        tot_sq = 0.0
        for t in range(lo, hi):
            v = y[idx[t]]
            tot += v
            tot_sq += v * v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        if ymin == ymax:
            continue

        best_score = np.inf
        best_f = -1
        best_thr = 0.0
        for j in range(mtry):
            r = j + _below(state, p - j)
            tmp = feats[j]
            feats[j] = feats[r]
            feats[r] = tmp
            f = feats[j]
            for t in range(m):
                vals[t] = X[idx[lo + t], f]
            order = np.argsort(vals[:m], kind="quicksort")
            s_l = 0.0
            sq_l = 0.0
            for t in range(m - 1):
                v = y[idx[lo + order[t]]]
                s_l += v
                sq_l += v * v
                nl = t + 1
                nr = m - nl
                if nl < min_leaf:
                    continue
                if nr < min_leaf:
                    break
                a = vals[order[t]]
                b = vals[order[t + 1]]
                if a == b:
                    continue
                s_r = tot - s_l
                score = (sq_l - s_l * s_l / nl) + ((tot_sq - sq_l) - s_r * s_r / nr)
                if score < best_score:
                    best_score = score
                    best_f = f
                    thr = a + (b - a) / 2.0
                    if not (thr < b):
                        thr = a
                    best_thr = thr
        if best_f < 0:
            continue

        nl = 0
        for t in range(lo, hi):
            if X[idx[t], best_f] <= best_thr:
                buf[nl] = idx[t]
                nl += 1
        k = nl
        for t in range(lo, hi):
            if not (X[idx[t], best_f] <= best_thr):
                buf[k] = idx[t]
                k += 1
        for t in range(m):
            idx[lo + t] = buf[t]

        feature[node] = best_f
        threshold[node] = best_thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        st_node[sp] = rc
        st_lo[sp] = lo + nl
        st_hi[sp] = hi
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = lc
        st_lo[sp] = lo
        st_hi[sp] = lo + nl
        st_depth[sp] = depth + 1
        sp += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), leaf_start[:n_nodes].copy(), leaf_count[:n_nodes].copy(), idx)


@nb.njit(cache=True, nogil=True)
def _leaf_of(feature, threshold, left, right, base, x):
    node = 0
    while feature[base + node] >= 0:
        if x[feature[base + node]] <= threshold[base + node]:
            node = left[base + node]
        else:
            node = right[base + node]
    return node


@nb.njit(cache=True, nogil=True)
def _raw_weights(feature, threshold, left, right, leaf_start, leaf_count, samples,
                 node_off, samp_off, x, w, touched):
    """Accumulate sum_t count/leaf_size into ``w``; returns number of touched entries."""
    n_touched = 0
    for t in range(len(node_off) - 1):
        leaf = _leaf_of(feature, threshold, left, right, node_off[t], x)
        g = node_off[t] + leaf
        c = leaf_count[g]
        inc = 1.0 / c
        s0 = samp_off[t] + leaf_start[g]
        for q in range(s0, s0 + c):
            i = samples[q]
            if w[i] == 0.0:
                touched[n_touched] = i
                n_touched += 1
            w[i] += inc
    return n_touched


@nb.njit(cache=True, nogil=True)
def _apply(feature, threshold, left, right, node_off, X):
    """Leaf node of every query in every tree (tree-major for cache locality)."""
    n_t = len(node_off) - 1
    leaves = np.empty((X.shape[0], n_t), dtype=np.int64)
    for t in range(n_t):
        for r in range(X.shape[0]):
            leaves[r, t] = _leaf_of(feature, threshold, left, right, node_off[t], X[r])
    return leaves


@nb.njit(cache=True, nogil=True)
def _quantiles(leaves, leaf_start, leaf_count, samples, node_off, samp_off, rank, order, y, alphas):
    n_q, n_t = leaves.shape
    out = np.empty((n_q, len(alphas)), dtype=np.float64)
    mean = np.empty(n_q, dtype=np.float64)
    w = np.zeros(len(y), dtype=np.float64)
    touched = np.empty(len(y), dtype=np.int64)
    for r in range(n_q):
        nt = 0
        for t in range(n_t):
            g = node_off[t] + leaves[r, t]
            c = leaf_count[g]
            inc = 1.0 / c
            s0 = samp_off[t] + leaf_start[g]
            for q in range(s0, s0 + c):
                i = samples[q]
                if w[i] == 0.0:
                    touched[nt] = i
                    nt += 1
                w[i] += inc
        ranks = np.empty(nt, dtype=np.int64)
        total = 0.0
        for j in range(nt):
            ranks[j] = rank[touched[j]]
            total += w[touched[j]]
        ranks.sort()
        acc = 0.0
        for j in range(nt):
            acc += w[order[ranks[j]]] * y[order[ranks[j]]]
        mean[r] = acc / total
        for a in range(len(alphas)):
            level = alphas[a] * total * (1.0 - _CDF_TOL)
            cum = 0.0
            res = y[order[ranks[nt - 1]]]
            for j in range(nt):
                cum += w[order[ranks[j]]]
                if cum >= level:
                    res = y[order[ranks[j]]]
                    break
            out[r, a] = res
        for j in range(nt):
            w[touched[j]] = 0.0
    return out, mean


# --- public API -------------------------------------------------------------

def _grow_one(X, y, params: QrfParams, mtry: int, t: int) -> QrfTree:
    depth = -1 if params.max_depth is None else params.max_depth
    arrays = _grow(X, y, np.uint64(params.seed), np.uint64(t), mtry, params.min_leaf, depth)
    for a in arrays:
        a.flags.writeable = False
    return QrfTree(*arrays)


def fit_qrf(data: SampleMatrix, params: QrfParams = QrfParams(), n_jobs: int = 1) -> QrfModel:
    """Grow ``params.n_trees`` bootstrap trees; parallel and serial fits are identical."""
    X = np.ascontiguousarray(data.features, dtype=np.float64)
    y = np.ascontiguousarray(data.target, dtype=np.float64)
    n = len(y)
    if n < params.min_leaf or n == 0:
        raise InsufficientDataError(f"QRF needs at least min_leaf={params.min_leaf} rows, got {n}")
    mtry = params.resolve_mtry(X.shape[1])
    if n_jobs == 1:
        trees = [_grow_one(X, y, params, mtry, t) for t in range(params.n_trees)]
    else:
        from joblib import Parallel, delayed

        trees = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_grow_one)(X, y, params, mtry, t) for t in range(params.n_trees))
    target = y.copy()
    target.flags.writeable = False
    return QrfModel(tuple(trees), target, X.shape[1], params, tuple(data.feature_names))


def _check_query(model: QrfModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.width:
        raise ValueError(f"query width {X.shape[1]} does not match model width {model.width}")
    return np.ascontiguousarray(X)


def qrf_weights(model: QrfModel, x) -> np.ndarray:
    """Normalized co-residence weights of the training samples for query ``x``."""
    x = _check_query(model, x)
    if x.shape[0] != 1:
        raise ValueError("qrf_weights takes a single query vector")
    f = model._flat
    w = np.zeros(len(model.target))
    touched = np.empty(len(model.target), dtype=np.int64)
    _raw_weights(f["feature"], f["threshold"], f["left"], f["right"], f["leaf_start"],
                 f["leaf_count"], f["samples"], f["node_off"], f["samp_off"], x[0], w, touched)
    return w / w.sum()


def qrf_predict(model: QrfModel, X, alphas) -> tuple[np.ndarray, np.ndarray]:
    """Quantiles (rows x alphas) and weighted means for a batch of queries."""
    alphas = np.atleast_1d(np.asarray(alphas, dtype=np.float64))
    if np.any(alphas <= 0) or np.any(alphas >= 1):
        raise ValueError("quantile levels must lie in (0, 1)")
    X = _check_query(model, X)
    f = model._flat
    leaves = _apply(f["feature"], f["threshold"], f["left"], f["right"], f["node_off"], X)
    return _quantiles(leaves, f["leaf_start"], f["leaf_count"], f["samples"], f["node_off"],
                      f["samp_off"], f["rank"], f["order"], model.target, alphas)


def qrf_quantile(model: QrfModel, x, alpha: float) -> float:
    """Smallest training target whose weighted CDF at ``x`` reaches ``alpha``."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    q, _ = qrf_predict(model, x, [alpha])
    return float(q[0, 0])


def qrf_mean(model: QrfModel, x) -> float:
    _, mean = qrf_predict(model, x, [0.5])
    return float(mean[0])


def save_qrf(model: QrfModel, path) -> None:
    """Write the forest as an ``.npz`` archive (see README for the layout)."""
    f = model._flat
    p = model.params
    np.savez(
        path, format_version=np.int64(FORMAT_VERSION), target=model.target, width=np.int64(model.width),
        n_trees=np.int64(p.n_trees), min_leaf=np.int64(p.min_leaf),
        mtry=np.int64(-1 if p.mtry is None else p.mtry),
        max_depth=np.int64(-1 if p.max_depth is None else p.max_depth),
        seed=np.uint64(p.seed), quantile=np.float64(p.quantile),
        feature_names=np.array(model.feature_names, dtype=str),
        **{k: f[k] for k in ("feature", "threshold", "left", "right", "leaf_start", "leaf_count",
                             "samples", "node_off", "samp_off")},
    )


def load_qrf(path) -> QrfModel:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported QRF model format {version}")
        mtry, depth = int(z["mtry"]), int(z["max_depth"])
        params = QrfParams(int(z["n_trees"]), int(z["min_leaf"]), None if mtry < 0 else mtry,
                           None if depth < 0 else depth, int(z["seed"]), float(z["quantile"]))
        no, so = z["node_off"], z["samp_off"]
        trees = []
        for t in range(len(no) - 1):
            a, b = no[t], no[t + 1]
            trees.append(QrfTree(z["feature"][a:b], z["threshold"][a:b], z["left"][a:b],
                                 z["right"][a:b], z["leaf_start"][a:b], z["leaf_count"][a:b],
                                 z["samples"][so[t]:so[t + 1]]))
        return QrfModel(tuple(trees), z["target"], int(z["width"]), params,
                        tuple(str(s) for s in z["feature_names"]))
