"""Classifier metrics and the within / across (train-on-synthetic, test-on-real) evaluations."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .gbm import GbmConfig, GbmModel, predict_proba, top_k_features, train
from .schema import DataTable, label_vector, split

__all__ = ["GbmConfig", "GbmModel", "train", "predict_proba", "top_k_features", "auroc", "auprc",
           "bootstrap_ci", "EvalReport", "eval_within", "eval_across", "evaluate_model"]

SCENARIOS = ("within", "across")


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d vectors of equal length")
    y = y.astype(float)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties counting half.

    Computed from midranks, which is algebraically the pairwise count.
    """
    s, y = _binary(scores, labels)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("auroc needs at least one positive and one negative")
    r = rankdata(s)
    return float((r[y].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def auprc(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of precision times recall gained."""
    s, y = _binary(scores, labels)
    n1 = int(y.sum())
    if n1 == 0:
        raise ValueError("auprc needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # end of each tie block
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    gained = np.diff(np.r_[0, tp]) / n1
    return float(np.sum(precision * gained))


_METRICS: dict[str, Callable] = {"auroc": auroc, "auprc": auprc}


def bootstrap_ci(scores, labels, metric: str | Callable = "auroc", n_boot: int = 1000,
                 rng_seed: int = 0, level: float = 0.95) -> tuple[float, float]:
    """Percentile interval over paired resamples; resamples the metric cannot score are redrawn."""
    fn = _METRICS[metric] if isinstance(metric, str) else metric
    s, y = _binary(scores, labels)
    fn(s, y)  # raises when the full sample already violates the precondition
    need_neg = fn is auroc or metric == "auroc"
    rng = np.random.default_rng(rng_seed)
    n = len(s)
    vals = np.empty(n_boot)
    for b in range(n_boot):
        for _ in range(1000):
            idx = rng.integers(0, n, n)
            k = int(y[idx].sum())
            if k > 0 and (not need_neg or k < n):
                break
        else:
            raise ValueError("could not draw a resample containing both classes")
        vals[b] = fn(s[idx], y[idx])
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(vals, [tail, 100 - tail])
    return float(lo), float(hi)


@dataclass(frozen=True)
class EvalReport:
    auroc: float
    auroc_ci: tuple[float, float]
    auprc: float
    auprc_ci: tuple[float, float]
    scenario: str
    n_train: int
    n_test: int
    ci_method: str = "percentile bootstrap"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        for v, (lo, hi) in ((self.auroc, self.auroc_ci), (self.auprc, self.auprc_ci)):
            if not (0 <= lo <= v <= hi <= 1):
                raise ValueError("metric must lie in [0,1] inside its interval")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["auroc_ci"], d["auprc_ci"] = list(self.auroc_ci), list(self.auprc_ci)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["auroc"], tuple(d["auroc_ci"]), d["auprc"], tuple(d["auprc_ci"]), d["scenario"],
                   d["n_train"], d["n_test"], d.get("ci_method", "percentile bootstrap"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _cover(value: float, ci: tuple[float, float]) -> tuple[float, float]:
    # percentile intervals can exclude the point estimate on skewed resampling distributions
    return min(ci[0], value), max(ci[1], value)


def evaluate_model(model: GbmModel, test: DataTable, scenario: str, n_train: int,
                   n_boot: int = 1000, rng_seed: int = 0) -> EvalReport:
    y = label_vector(test)
    keep = ~np.isnan(y)
    p = predict_proba(model, test)[keep]
    y = y[keep]
    a, ap = auroc(p, y), auprc(p, y)
    return EvalReport(a, _cover(a, bootstrap_ci(p, y, "auroc", n_boot, rng_seed)),
                      ap, _cover(ap, bootstrap_ci(p, y, "auprc", n_boot, rng_seed)),
                      scenario, n_train, int(keep.sum()))


def eval_within(synthetic: DataTable, config: GbmConfig = GbmConfig(), n_boot: int = 1000,
                rng_seed: int = 0, fraction: float = 0.8) -> EvalReport:
    """Stratified 80/20 split of one table: train on the larger part, score the rest."""
    tr, te = split(synthetic, fraction, config.rng_seed)
    model = train(tr, config)
    return evaluate_model(model, te, "within", tr.n_rows, n_boot, rng_seed)


def eval_across(synthetic: DataTable, real_test: DataTable, config: GbmConfig = GbmConfig(),
                n_boot: int = 1000, rng_seed: int = 0) -> EvalReport:
    """Train on every synthetic row, score real rows."""
    if synthetic.schema.label.name != real_test.schema.label.name:
        raise ValueError("synthetic and real tables disagree on the label column")
    model = train(synthetic, config)
    return evaluate_model(model, real_test, "across", synthetic.n_rows, n_boot, rng_seed)
