"""Gradient-boosted regression trees on logistic loss, written against numpy only.

Each round fits a depth-limited least-squares tree to the residuals
``y - p`` (split search on pre-binned features), sets every leaf to the
Newton step ``sum(r) / (sum(p(1-p)) + reg_lambda)`` and adds it scaled by the
learning rate. A round whose step would raise the training loss is halved
until it does not, so the recorded training loss never increases.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .schema import DataTable, encode, label_vector

FORMAT = "synthehr-gbm"
FORMAT_VERSION = 1
_EPS = 1e-7


@dataclass(frozen=True)
class GbmConfig:
    n_trees: int = 200
    max_depth: int = 4
    learning_rate: float = 0.1
    min_leaf: int = 10
    subsample: float = 0.8
    rng_seed: int = 0
    reg_lambda: float = 1.0
    max_bins: int = 64

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")
        if self.n_trees < 0 or self.min_leaf < 1 or self.max_bins < 2 or self.reg_lambda < 0:
            raise ValueError("invalid n_trees/min_leaf/max_bins/reg_lambda")


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    default_left: np.ndarray
    value: np.ndarray

    @property
    def depth(self) -> int:
        def walk(i):
            return 0 if self.feature[i] < 0 else 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index per row; nan goes the node's default direction."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            idx = rows[inner]
            n = node[inner]
            x = X[idx, f[inner]]
            go_left = np.where(np.isnan(x), self.default_left[n], x <= self.threshold[n])
            node[idx] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right",
                                                      "default_left", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=float),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["default_left"], dtype=bool), np.array(d["value"], dtype=float))


@dataclass(frozen=True, eq=False)
class GbmModel:
    feature_names: tuple[str, ...]
    trees: tuple[Tree, ...]
    base_score: float
    learning_rate: float
    feature_importance: dict[str, float]
    train_loss: tuple[float, ...] = ()
    label: str = ""
    allowed_values: dict | None = None

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "feature_names": list(self.feature_names),
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "feature_importance": self.feature_importance,
            "train_loss": list(self.train_loss),
            "label": self.label,
            "allowed_values": self.allowed_values,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbmModel":
        if d.get("format") != FORMAT or d.get("version") != FORMAT_VERSION:
            raise ValueError(f"not a {FORMAT} v{FORMAT_VERSION} model file")
        return cls(tuple(d["feature_names"]), tuple(Tree.from_dict(t) for t in d["trees"]),
                   float(d["base_score"]), float(d["learning_rate"]), dict(d["feature_importance"]),
                   tuple(d["train_loss"]), d.get("label", ""), d.get("allowed_values"))


def save_model(path, model: GbmModel) -> None:
    Path(path).write_text(json.dumps(model.to_dict()), encoding="utf-8")


def load_model(path) -> GbmModel:
    return GbmModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def logistic_loss(y: np.ndarray, p: np.ndarray) -> np.ndarray:
    p = np.clip(p, _EPS, 1 - _EPS)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


def _cuts(x: np.ndarray, max_bins: int) -> np.ndarray:
    u = np.unique(x)
    if len(u) <= max_bins:
        return (u[:-1] + u[1:]) / 2
    q = np.quantile(x, np.linspace(0, 1, max_bins + 1)[1:-1])
    return np.unique(q)


def _grow(Xb: np.ndarray, cuts: list[np.ndarray], n_cuts: np.ndarray, r: np.ndarray, h: np.ndarray,
          config: GbmConfig, importance: np.ndarray) -> Tree:
    n, d = Xb.shape
    B = int(n_cuts.max()) + 1 if d else 1
    valid = np.arange(B)[None, :] < n_cuts[:, None]  # split after bin b is a legal cut
    feature, threshold, left, right, dleft = [-1], [0.0], [-1], [-1], [False]
    node = np.zeros(n, dtype=np.int64)
    frontier = [0]
    Xo = Xb + (np.arange(d) * B)[None, :]
    for _ in range(config.max_depth):
        counts = np.bincount(node, minlength=len(feature))
        active = [k for k in frontier if counts[k] >= 2 * config.min_leaf]
        if not active:
            break
        local = np.full(len(feature), -1, dtype=np.int64)
        local[active] = np.arange(len(active))
        in_active = local[node] >= 0
        if in_active.all():
            rows = np.arange(n)
            ln = local[node]
            idx = (Xo + (ln * (d * B))[:, None]).ravel()
        else:
            rows = np.flatnonzero(in_active)
            ln = local[node[rows]]
            idx = (Xo[rows] + (ln * (d * B))[:, None]).ravel()
        size = len(active) * d * B
        hr = np.bincount(idx, weights=np.repeat(r[rows], d), minlength=size).reshape(len(active), d, B)
        hc = np.bincount(idx, minlength=size).reshape(len(active), d, B).astype(float)
        rl, cl = np.cumsum(hr, axis=2), np.cumsum(hc, axis=2)
        rt, ct = rl[:, :, -1:], cl[:, :, -1:]
        rr, cr = rt - rl, ct - cl
        ok = valid[None] & (cl >= config.min_leaf) & (cr >= config.min_leaf)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = rl ** 2 / cl + rr ** 2 / cr - rt ** 2 / ct
        gain = np.where(ok, gain, -np.inf)
        flat = gain.reshape(len(active), -1)
        best = np.argmax(flat, axis=1)
        new_frontier = []
        go_left_rows = np.zeros(n, dtype=bool)
        for a, k in enumerate(active):
            g = flat[a, best[a]]
            if not np.isfinite(g) or g <= 1e-12:
                continue
            j, b = divmod(int(best[a]), B)
            importance[j] += g
            lk, rk = len(feature), len(feature) + 1
            feature[k], threshold[k], left[k], right[k] = j, float(cuts[j][b]), lk, rk
            dleft[k] = bool(cl[a, j, b] >= cr[a, j, b])
            feature += [-1, -1]
            threshold += [0.0, 0.0]
            left += [-1, -1]
            right += [-1, -1]
            dleft += [False, False]
            members = rows[ln == a]
            go = Xb[members, j] <= b
            go_left_rows[members[go]] = True
            node[members] = np.where(go, lk, rk)
            new_frontier += [lk, rk]
        if not new_frontier:
            break
        frontier = new_frontier
    n_nodes = len(feature)
    sr = np.bincount(node, weights=r, minlength=n_nodes)
    sh = np.bincount(node, weights=h, minlength=n_nodes)
    value = np.where(np.array(feature) < 0, sr / (sh + config.reg_lambda + 1e-12), 0.0)
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(dleft, dtype=bool), value)


def _design(table: DataTable, names: Sequence[str]) -> np.ndarray:
    missing = [n for n in names if n not in table.schema]
    if missing:
        raise KeyError(f"table lacks model feature columns: {missing}")
    return encode(table, names)


def train(table: DataTable, config: GbmConfig = GbmConfig(),
          features: Sequence[str] | None = None) -> GbmModel:
    """Fit a boosted ensemble predicting the table's label from ``features``.

    ``features`` defaults to every non-label column. Missing training
    covariates are imputed with the column median (category mode).
    """
    schema = table.schema
    names = tuple(features) if features is not None else tuple(f.name for f in schema.covariates)
    y_all = label_vector(table)
    keep = ~np.isnan(y_all)
    y = y_all[keep]
    if (y == 1).sum() < 2 or (y == 0).sum() < 2:
        raise ValueError("training data needs at least two rows of each label class")
    X = _design(table, names)[keep]
    for j, name in enumerate(names):
        col = X[:, j]
        miss = np.isnan(col)
        if miss.any():
            obs = col[~miss]
            if schema[name].is_continuous:
                fill = float(np.median(obs)) if obs.size else 0.0
            else:
                vals, cnt = np.unique(obs, return_counts=True)
                fill = float(vals[np.argmax(cnt)]) if obs.size else 0.0
            col[miss] = fill
    n, d = X.shape
    cuts = [_cuts(X[:, j], config.max_bins) for j in range(d)]
    n_cuts = np.array([len(c) for c in cuts], dtype=np.int64)
    Xb = np.column_stack([np.searchsorted(cuts[j], X[:, j], side="left") for j in range(d)]) \
        if d else np.zeros((n, 0), dtype=np.int64)
    prior = y.mean()
    base = math.log(prior / (1 - prior))
    F = np.full(n, base)
    rng = np.random.default_rng(config.rng_seed)
    importance = np.zeros(d)
    losses = [float(logistic_loss(y, expit(F)).mean())]
    trees = []
    m = max(1, int(round(config.subsample * n)))
    for _ in range(config.n_trees):
        p = expit(F)
        r, h = y - p, p * (1 - p)
        rows = np.sort(rng.choice(n, size=m, replace=False)) if m < n else np.arange(n)
        tree = _grow(Xb[rows], cuts, n_cuts, r[rows], h[rows], config, importance)
        step = config.learning_rate * tree.predict(X)
        scale = 1.0
        for _ in range(30):
            loss = float(logistic_loss(y, expit(F + scale * step)).mean())
            if loss <= losses[-1]:
                break
            scale *= 0.5
        else:
            scale, loss = 0.0, losses[-1]
        if scale != 1.0:
            tree = Tree(tree.feature, tree.threshold, tree.left, tree.right, tree.default_left,
                        tree.value * scale)
        F = F + scale * step
        losses.append(loss)
        trees.append(tree)
    allowed = {n: list(schema[n].allowed_values) for n in names if not schema[n].is_continuous}
    return GbmModel(names, tuple(trees), base, config.learning_rate,
                    {name: float(importance[j]) for j, name in enumerate(names)},
                    tuple(losses), schema.label.name, allowed)


def raw_score(model: GbmModel, table: DataTable) -> np.ndarray:
    for name, values in (model.allowed_values or {}).items():
        if name in table.schema and list(table.schema[name].allowed_values) != values:
            raise ValueError(f"feature {name!r} categories differ from the training schema")
    X = _design(table, model.feature_names)
    F = np.full(table.n_rows, model.base_score)
    for t in model.trees:
        F += model.learning_rate * t.predict(X)
    return F


def predict_proba(model: GbmModel, table: DataTable) -> np.ndarray:
    """P(label = positive) for every row; values stay strictly inside (0, 1)."""
    return np.clip(expit(raw_score(model, table)), 1e-15, 1 - 1e-15)


def top_k_features(model: GbmModel, k: int) -> list[str]:
    """Features by descending total split gain, ties by name."""
    if k > len(model.feature_names):
        raise ValueError(f"k={k} exceeds {len(model.feature_names)} model features")
    order = sorted(model.feature_names, key=lambda n: (-model.feature_importance[n], n))
    return order[:k]
