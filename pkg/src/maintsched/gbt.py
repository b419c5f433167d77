"""Gradient-boosted regression trees (squared error or pinball loss) and a linear baseline.

Trees are grown level by level with exact greedy splits: every unique value a
feature takes inside a node is a candidate threshold (``x <= threshold`` goes
left).  Split gain is the usual variance reduction on the negative gradients.
For pinball loss the gradients only carry a sign, so after each tree is grown
its leaf values are refit to the empirical q-quantile of the residuals that
land in the leaf.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numba
import numpy as np

SQUARED_ERROR = "squared_error"
PINBALL = "pinball"

_QEPS = 1e-9
_TIE_RTOL = 1e-9


def empirical_quantile(values: np.ndarray, q: float) -> float:
    """Lower empirical quantile: the ceil(q*n)-th smallest value.

    This is an exact minimiser of the summed pinball loss.
    """
    v = np.sort(np.asarray(values, dtype=float))
    k = min(max(math.ceil(q * len(v) - _QEPS) - 1, 0), len(v) - 1)
    return float(v[k])


def pinball_loss(y, yhat, q: float):
    """q*(y-yhat) when y >= yhat, else (q-1)*(y-yhat).  Works elementwise."""
    if not 0 < q < 1:
        raise ValueError("invalid quantile")
    diff = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
    out = np.where(diff >= 0, q * diff, (q - 1) * diff)
    return float(out) if out.ndim == 0 else out


@numba.njit(cache=True)
def _quantile_leaf_values(residual, leaf, counts, q, eps):
    """Lower empirical q-quantile of the residuals in each leaf (0 for empty leaves)."""
    n_nodes = len(counts)
    starts = np.zeros(n_nodes + 1, dtype=np.int64)
    for j in range(n_nodes):
        starts[j + 1] = starts[j] + counts[j]
    fill = starts[:-1].copy()
    grouped = np.empty(len(residual))
    for i in range(len(residual)):
        grouped[fill[leaf[i]]] = residual[i]
        fill[leaf[i]] += 1
    values = np.zeros(n_nodes)
    for j in range(n_nodes):
        c = counts[j]
        if c == 0:
            continue
        part = np.sort(grouped[starts[j]:starts[j + 1]])
        k = min(max(int(math.ceil(q * c - eps)) - 1, 0), c - 1)
        values[j] = part[k]
    return values


@dataclass(frozen=True)
class Loss:
    kind: str = SQUARED_ERROR
    q: float | None = None

    def __post_init__(self):
        if self.kind == PINBALL:
            if self.q is None or not 0 < self.q < 1:
                raise ValueError("invalid quantile")
        elif self.kind == SQUARED_ERROR:
            if self.q is not None:
                raise ValueError("squared error loss takes no quantile")
        else:
            raise ValueError(f"unknown loss kind {self.kind!r}")

    @classmethod
    def squared_error(cls) -> "Loss":
        return cls(SQUARED_ERROR)

    @classmethod
    def pinball(cls, q: float) -> "Loss":
        return cls(PINBALL, float(q))

    def mean_loss(self, y: np.ndarray, pred: np.ndarray) -> float:
        if self.kind == PINBALL:
            return float(np.mean(pinball_loss(y, pred, self.q)))
        return float(np.mean((y - pred) ** 2))

    def init_score(self, y: np.ndarray) -> float:
        if self.kind == PINBALL:
            return empirical_quantile(y, self.q)
        return float(np.mean(y))

    def negative_gradient(self, y: np.ndarray, pred: np.ndarray) -> np.ndarray:
        if self.kind == PINBALL:
            return np.where(y >= pred, self.q, self.q - 1.0)
        return y - pred

    def leaf_values(self, residual: np.ndarray, leaf: np.ndarray, n_nodes: int) -> np.ndarray:
        counts = np.bincount(leaf, minlength=n_nodes)
        values = np.zeros(n_nodes)
        if self.kind == SQUARED_ERROR:
            sums = np.bincount(leaf, weights=residual, minlength=n_nodes)
            np.divide(sums, counts, out=values, where=counts > 0)
            return values
        return _quantile_leaf_values(residual, leaf, counts, self.q, _QEPS)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "q": self.q}


@dataclass(frozen=True)
class Hyperparams:
    num_rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 4
    min_samples_leaf: int = 20
    seed: int = 0  # unused by the exact greedy builder; kept for reproducibility metadata

    def __post_init__(self):
        if self.num_rounds < 1:
            raise ValueError("num_rounds must be positive")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must be in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be positive")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be positive")


@dataclass(frozen=True)
class Tree:
    """Flat array tree.  ``feature[i] == -1`` marks a leaf holding ``value[i]``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    depth: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        for _ in range(self.depth):
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                break
            go_left = X[rows, np.where(internal, f, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_preorder(self) -> list[dict]:
        out: list[dict] = []
        stack = [0]
        while stack:
            i = stack.pop()
            if self.feature[i] < 0:
                out.append({"value": float(self.value[i])})
            else:
                out.append({"feature": int(self.feature[i]), "threshold": float(self.threshold[i])})
                stack.append(int(self.right[i]))
                stack.append(int(self.left[i]))
        return out

    @classmethod
    def from_preorder(cls, nodes: Sequence[dict]) -> "Tree":
        feature, threshold, left, right, value = [], [], [], [], []
        pos = 0

        def build(depth: int) -> tuple[int, int]:
            nonlocal pos
            if pos >= len(nodes):
                raise ValueError("truncated tree")
            d = nodes[pos]
            pos += 1
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "value" in d:
                value[i] = float(d["value"])
                return i, depth
            feature[i] = int(d["feature"])
            threshold[i] = float(d["threshold"])
            li, dl = build(depth + 1)
            ri, dr = build(depth + 1)
            left[i], right[i] = li, ri
            return i, max(dl, dr)

        _, depth = build(0)
        if pos != len(nodes):
            raise ValueError("trailing nodes after tree")
        return cls(
            np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
            np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
            np.array(value, dtype=float), depth,
        )


@dataclass(frozen=True)
class BoostedModel:
    base_score: float
    trees: tuple[Tree, ...]
    learning_rate: float
    loss: Loss
    n_features: int
    floor: float = 0.0
    train_loss: tuple[float, ...] = field(default=(), compare=False, repr=False)

    def raw_predict(self, X: np.ndarray) -> np.ndarray:
        X = _check_matrix(X, self.n_features)
        out = np.full(len(X), self.base_score)
        for t in self.trees:
            out += self.learning_rate * t.predict(X)
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.maximum(self.raw_predict(X), self.floor)

    def staged_predict(self, X: np.ndarray, rounds: Sequence[int]) -> dict[int, np.ndarray]:
        """Floored predictions after each requested number of rounds."""
        X = _check_matrix(X, self.n_features)
        wanted = set(rounds)
        out = {}
        acc = np.full(len(X), self.base_score)
        if 0 in wanted:
            out[0] = np.maximum(acc, self.floor)
        for i, t in enumerate(self.trees, start=1):
            acc = acc + self.learning_rate * t.predict(X)
            if i in wanted:
                out[i] = np.maximum(acc, self.floor)
        return out

    def truncate(self, n_rounds: int) -> "BoostedModel":
        """The same ensemble cut to its first ``n_rounds`` trees."""
        return replace(self, trees=self.trees[:n_rounds], train_loss=self.train_loss[: n_rounds + 1])

    def to_dict(self) -> dict:
        return {
            "type": "boosted_trees",
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "loss": self.loss.to_dict(),
            "n_features": self.n_features,
            "floor": self.floor,
            "trees": [t.to_preorder() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedModel":
        return cls(
            base_score=float(d["base_score"]),
            trees=tuple(Tree.from_preorder(t) for t in d["trees"]),
            learning_rate=float(d["learning_rate"]),
            loss=Loss(d["loss"]["kind"], d["loss"]["q"]),
            n_features=int(d["n_features"]),
            floor=float(d.get("floor", 0.0)),
        )


def _check_matrix(X, width: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != width:
        raise ValueError(f"shape error: expected width {width}, got {X.shape}")
    return X


class _Binned:
    """Per-feature unique values and bin codes, offset into one shared bin axis."""

    def __init__(self, X: np.ndarray):
        n, F = X.shape
        self.uniques = []
        codes = np.empty((n, F), dtype=np.int64)
        for f in range(F):
            u, inv = np.unique(X[:, f], return_inverse=True)
            self.uniques.append(u)
            codes[:, f] = inv
        self.sizes = np.array([len(u) for u in self.uniques], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.int64)
        self.codes = codes


@numba.njit(cache=True)
def _grow_kernel(codes, offsets, sizes, grad, max_depth, min_leaf):
    """Level-wise exact greedy growth on bin codes (compiled).

    Returns (feature, threshold code, left, right, leaf of each sample, depth, node count).
    """
    n, F = codes.shape
    B = offsets[F - 1] + sizes[F - 1]
    cap = min(2 ** (max_depth + 1) - 1, 2 * n - 1)
    feature = np.full(cap, -1, dtype=np.int64)
    thr = np.full(cap, -1, dtype=np.int64)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    size = np.zeros(cap, dtype=np.int64)
    node_of = np.zeros(n, dtype=np.int64)
    size[0] = n
    n_nodes = 1
    frontier = np.zeros(1 if n >= 2 * min_leaf else 0, dtype=np.int64)
    depth = 0
    for _ in range(max_depth):
        A = len(frontier)
        if A == 0:
            break
        local = np.full(n_nodes, -1, dtype=np.int64)
        for a in range(A):
            local[frontier[a]] = a
        hg = np.zeros((A, B))
        hc = np.zeros((A, B), dtype=np.int64)
        G = np.zeros(A)
        for i in range(n):
            a = local[node_of[i]]
            if a < 0:
                continue
            g = grad[i]
            G[a] += g
            for f in range(F):
                b = offsets[f] + codes[i, f]
                hg[a, b] += g
                hc[a, b] += 1
        split_any = False
        for a in range(A):
            node = frontier[a]
            N = size[node]
            parent = G[a] * G[a] / N
            best_gain = -np.inf
            best_f = -1
            best_c = -1
            best_nl = 0
            for f in range(F):
                lg = 0.0
                lc = 0
                for c in range(sizes[f]):
                    b = offsets[f] + c
                    if hc[a, b] == 0:
                        continue
                    lg += hg[a, b]
                    lc += hc[a, b]
                    rc = N - lc
                    if lc < min_leaf or rc < min_leaf:
                        continue
                    rg = G[a] - lg
                    gain = lg * lg / lc + rg * rg / rc - parent
                    # gains equal up to rounding are ties, kept by the first (lowest feature,
                    # then lowest threshold); correlated columns often give identical partitions
                    if best_f < 0 or gain > best_gain + _TIE_RTOL * abs(best_gain):
                        best_gain = gain
                        best_f = f
                        best_c = c
                        best_nl = lc
            if best_gain > 1e-12:
                split_any = True
                feature[node] = best_f
                thr[node] = best_c
                left[node] = n_nodes
                right[node] = n_nodes + 1
                size[n_nodes] = best_nl
                size[n_nodes + 1] = N - best_nl
                n_nodes += 2
        if not split_any:
            break
        depth += 1
        for i in range(n):
            nd = node_of[i]
            f = feature[nd]
            if f >= 0:
                node_of[i] = left[nd] if codes[i, f] <= thr[nd] else right[nd]
        count = 0
        nxt = np.empty(2 * A, dtype=np.int64)
        for a in range(A):
            node = frontier[a]
            if feature[node] < 0:
                continue
            for child in (left[node], right[node]):
                if size[child] >= 2 * min_leaf:
                    nxt[count] = child
                    count += 1
        frontier = nxt[:count]
    return feature[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], node_of, depth


def _grow(binned: _Binned, grad: np.ndarray, max_depth: int, min_leaf: int):
    """Grow one tree on ``grad``; returns node arrays (real thresholds) and each sample's leaf."""
    feature, thr, left, right, node_of, depth = _grow_kernel(
        binned.codes, binned.offsets, binned.sizes, np.ascontiguousarray(grad, dtype=float),
        max_depth, min_leaf)
    threshold = np.zeros(len(feature))
    for i in np.flatnonzero(feature >= 0):
        threshold[i] = binned.uniques[feature[i]][thr[i]]
    return feature, threshold, left, right, node_of, depth


def fit(features, targets, loss: Loss, hp: Hyperparams, floor: float = 0.0) -> BoostedModel:
    """Fit ``hp.num_rounds`` boosted trees.

    Deterministic: no row or column subsampling is performed.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or len(X) != len(y) or X.shape[1] == 0:
        raise ValueError(f"shape error: features {X.shape} vs targets {y.shape}")
    if len(y) < hp.min_samples_leaf or len(y) == 0:
        raise ValueError("insufficient data")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise ValueError("invalid record: non-finite training data")
    if np.any(y <= 0):
        raise ValueError("targets must be positive")

    binned = _Binned(X)
    base = loss.init_score(y)
    pred = np.full(len(y), base)
    history = [loss.mean_loss(y, pred)]
    trees = []
    for _ in range(hp.num_rounds):
        grad = loss.negative_gradient(y, pred)
        feat, thr, lft, rgt, leaf, depth = _grow(binned, grad, hp.max_depth, hp.min_samples_leaf)
        values = loss.leaf_values(y - pred, leaf, len(feat))
        values[feat >= 0] = 0.0
        trees.append(Tree(feat, thr, lft, rgt, values, depth))
        pred = pred + hp.learning_rate * values[leaf]
        history.append(loss.mean_loss(y, pred))
    return BoostedModel(base, tuple(trees), hp.learning_rate, loss, X.shape[1], floor, tuple(history))


def predict(model, x) -> float | np.ndarray:
    """Predict one feature vector (returns a float) or a matrix (returns an array)."""
    values = getattr(x, "values", x)
    arr = np.asarray(values, dtype=float)
    out = model.predict(arr)
    return float(out[0]) if arr.ndim == 1 else out


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    intercept: float
    floor: float = 0.0

    @property
    def n_features(self) -> int:
        return len(self.weights)

    def raw_predict(self, X: np.ndarray) -> np.ndarray:
        X = _check_matrix(X, self.n_features)
        return X @ self.weights + self.intercept

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.maximum(self.raw_predict(X), self.floor)

    def to_dict(self) -> dict:
        return {"type": "linear", "weights": [float(w) for w in self.weights],
                "intercept": self.intercept, "floor": self.floor}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(np.array(d["weights"], dtype=float), float(d["intercept"]), float(d.get("floor", 0.0)))


def fit_linear(features, targets, ridge: float = 1e-6) -> LinearModel:
    """Least squares with an unpenalised intercept.

    Columns are standardised before solving the ridge-damped normal equations;
    constant columns get weight 0, so an all-constant design yields
    ``intercept == mean(targets)``.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError(f"shape error: features {X.shape} vs targets {y.shape}")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    live = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
    w = np.zeros(X.shape[1])
    y_mean = float(y.mean())
    if live.any():
        Z = (X[:, live] - mu[live]) / sd[live]
        A = Z.T @ Z + ridge * np.eye(Z.shape[1])
        beta = np.linalg.solve(A, Z.T @ (y - y_mean))
        w[live] = beta / sd[live]
    intercept = y_mean - float(mu @ w)
    return LinearModel(w, intercept)


def model_to_json(model) -> str:
    return json.dumps(model.to_dict(), sort_keys=True)


def model_from_json(text: str):
    d = json.loads(text)
    if d.get("type") == "linear":
        return LinearModel.from_dict(d)
    return BoostedModel.from_dict(d)
