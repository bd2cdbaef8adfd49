"""Per-feature KL divergence between real (P) and synthetic (Q) tables, in nats."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .schema import DataTable

MIN_VALUES = 30
DEFAULT_BINS = 64
DEFAULT_EPSILON = 0.5


class InsufficientSample(ValueError):
    pass


def _kl_counts(cp: np.ndarray, cq: np.ndarray, epsilon: float) -> float:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    cp = np.asarray(cp, dtype=float)
    cq = np.asarray(cq, dtype=float)
    if cp.sum() == 0 and cq.sum() == 0:
        raise ValueError("both frequency tables are empty")
    p = (cp + epsilon) / (cp.sum() + epsilon * len(cp))
    q = (cq + epsilon) / (cq.sum() + epsilon * len(cq))
    return max(0.0, float(np.sum(p * np.log(p / q))))


def kl_categorical(p_counts: Mapping[str, float], q_counts: Mapping[str, float],
                   epsilon: float = DEFAULT_EPSILON) -> float:
    """D(P||Q) over the union of categories after adding ``epsilon`` to every count."""
    cats = sorted(set(p_counts) | set(q_counts))
    cp = np.array([p_counts.get(c, 0.0) for c in cats])
    cq = np.array([q_counts.get(c, 0.0) for c in cats])
    return _kl_counts(cp, cq, epsilon)


def shared_edges(p: np.ndarray, q: np.ndarray, n_bins: int = DEFAULT_BINS) -> np.ndarray:
    lo = min(p.min(), q.min())
    hi = max(p.max(), q.max())
    return np.linspace(lo, hi, n_bins + 1)


def _observed(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[~np.isnan(x)]


def kl_continuous(p_sample, q_sample, n_bins: int = DEFAULT_BINS,
                  epsilon: float = DEFAULT_EPSILON) -> float:
    """Binned D(P||Q) on equal-width bins spanning the pooled sample range."""
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    p, q = _observed(p_sample), _observed(q_sample)
    if len(p) < MIN_VALUES or len(q) < MIN_VALUES:
        raise InsufficientSample(f"need {MIN_VALUES} non-missing values per side, got {len(p)}/{len(q)}")
    edges = shared_edges(p, q, n_bins)
    if edges[0] == edges[-1]:
        return 0.0
    cp, _ = np.histogram(p, bins=edges)
    cq, _ = np.histogram(q, bins=edges)
    return _kl_counts(cp, cq, epsilon)


@dataclass
class KlReport:
    per_feature: dict[str, float]
    kinds: dict[str, str] = field(default_factory=dict)
    skipped_features: dict[str, str] = field(default_factory=dict)

    @property
    def evaluated_features(self) -> list[str]:
        return list(self.per_feature)

    @property
    def average(self) -> float:
        return float(np.mean(list(self.per_feature.values()))) if self.per_feature else math.nan

    @property
    def continuous_average(self) -> float:
        vals = [v for k, v in self.per_feature.items() if self.kinds.get(k) == "continuous"]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def headline(self) -> float:
        """Continuous-only average when any continuous feature was evaluated, else the overall one."""
        c = self.continuous_average
        return c if not math.isnan(c) else self.average

    def to_dict(self) -> dict:
        return {
            "per_feature": self.per_feature,
            "kinds": self.kinds,
            "average": _nan_none(self.average),
            "continuous_average": _nan_none(self.continuous_average),
            "evaluated_features": self.evaluated_features,
            "skipped_features": self.skipped_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KlReport":
        return cls(dict(d["per_feature"]), dict(d.get("kinds", {})), dict(d.get("skipped_features", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "divergence"])
        for k, v in self.per_feature.items():
            w.writerow([k, repr(v)])
        return buf.getvalue()


def _nan_none(x: float):
    return None if math.isnan(x) else x


def _feature_kl(real: DataTable, synthetic: DataTable, name: str, n_bins: int, epsilon: float) -> float:
    spec = real.schema[name]
    if spec.is_continuous:
        return kl_continuous(real.columns[name], synthetic.columns[name], n_bins, epsilon)
    p = [v for v in real.columns[name] if v != ""]
    q = [v for v in synthetic.columns[name] if v != ""]
    if len(p) < MIN_VALUES or len(q) < MIN_VALUES:
        raise InsufficientSample(f"need {MIN_VALUES} non-missing values per side, got {len(p)}/{len(q)}")
    return kl_categorical(Counter(p), Counter(q), epsilon)


def kl_table(real: DataTable, synthetic: DataTable, features: Sequence[str] | None = None,
             n_bins: int = DEFAULT_BINS, epsilon: float = DEFAULT_EPSILON) -> KlReport:
    """Per-feature divergence D(real || synthetic); features failing preconditions are skipped."""
    names = list(features) if features is not None else real.schema.names
    report = KlReport({})
    for name in names:
        if name not in real.schema or name not in synthetic.schema:
            report.skipped_features[name] = "absent from one of the tables"
            continue
        if real.schema[name].kind != synthetic.schema[name].kind:
            raise ValueError(f"feature {name!r} has different kinds in the two schemas")
        try:
            report.per_feature[name] = _feature_kl(real, synthetic, name, n_bins, epsilon)
            report.kinds[name] = real.schema[name].kind
        except InsufficientSample as exc:
            report.skipped_features[name] = str(exc)
    if not report.per_feature:
        raise ValueError("no feature could be evaluated")
    return report


def rank_features(report: KlReport, k: int) -> tuple[list[str], list[str]]:
    """(best k, worst k): lowest and highest divergences, ties by name."""
    if k > len(report.per_feature):
        raise ValueError(f"k={k} exceeds {len(report.per_feature)} evaluated features")
    order = sorted(report.per_feature, key=lambda n: (report.per_feature[n], n))
    return order[:k], order[::-1][:k]


@dataclass
class GroupKlReport:
    group_feature: str
    per_group: dict[str, KlReport]

    @property
    def averages(self) -> dict[str, float]:
        return {g: r.headline for g, r in self.per_group.items()}

    def to_dict(self) -> dict:
        return {"group_feature": self.group_feature,
                "per_group": {g: r.to_dict() for g, r in self.per_group.items()},
                "averages": {g: _nan_none(v) for g, v in self.averages.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def kl_by_group(real: DataTable, synthetic: DataTable, group_feature: str,
                n_bins: int = DEFAULT_BINS, epsilon: float = DEFAULT_EPSILON) -> GroupKlReport:
    """kl_table within each group value observed in the real table."""
    for t in (real, synthetic):
        if group_feature not in t.schema or t.schema[group_feature].role != "group":
            raise ValueError(f"{group_feature!r} is not a group feature in both schemas")
    features = [n for n in real.schema.names if n != group_feature]
    spec = real.schema[group_feature]
    rcol, scol = real.columns[group_feature], synthetic.columns[group_feature]
    seen = set(rcol) - {""}
    out = {}
    for g in (v for v in spec.allowed_values if v in seen):
        r = real.take(np.flatnonzero(rcol == g))
        s_rows = np.flatnonzero(scol == g)
        if s_rows.size == 0:
            out[g] = KlReport({}, skipped_features={n: "no synthetic rows" for n in features})
            continue
        s = synthetic.take(s_rows)
        try:
            out[g] = kl_table(r, s, features, n_bins, epsilon)
        except ValueError:
            rep = KlReport({})
            for n in features:
                rep.skipped_features[n] = "insufficient rows in group"
            out[g] = rep
    return GroupKlReport(group_feature, out)


def overlay_histograms(real: DataTable, synthetic: DataTable, n_bins: int = DEFAULT_BINS) -> list[dict]:
    """Density histograms on shared bins for every continuous feature (plot data)."""
    rows = []
    for spec in real.schema:
        if not spec.is_continuous or spec.name not in synthetic.schema:
            continue
        p, q = _observed(real.columns[spec.name]), _observed(synthetic.columns[spec.name])
        if not len(p) or not len(q):
            continue
        edges = shared_edges(p, q, n_bins)
        if edges[0] == edges[-1]:
            continue
        dp, _ = np.histogram(p, bins=edges, density=True)
        dq, _ = np.histogram(q, bins=edges, density=True)
        for i in range(n_bins):
            rows.append({"feature": spec.name, "bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]),
                         "real_density": float(dp[i]), "synthetic_density": float(dq[i])})
    return rows
