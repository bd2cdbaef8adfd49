"""Generation strategies over a pluggable backend.

The offline reference backend fits a transparent parametric model to the
seed rows and samples from it:

* ``naive`` / ``schema_constrained``: independent per-feature marginals
  (Freedman-Diaconis histograms, frequency tables). The schema-constrained
  variant puts a half-count prior on every allowed category, so it may emit
  declared values the seed never showed.
* ``conditional``: features drawn in schema order. A continuous feature is
  linear-Gaussian in its (standardized, one-hot) predecessors on a
  normal-score scale, mapped back through the seed's empirical quantiles so
  skewed or integer-valued marginals are kept; the binary
  label is logistic in its predecessors; other categoricals stay
  predecessor-blind frequency tables.
* ``group_based``: the conditional model fitted separately per observed
  value of the group feature, with a uniform per-group sample quota.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm, rankdata

from .schema import (
    CellViolation,
    DataTable,
    FeatureSpec,
    TableSchema,
    concat,
    empty_table,
)

VARIANTS = ("naive", "schema_constrained", "conditional", "group_based")
_ALIASES = {"schema": "schema_constrained", "group": "group_based", "cond": "conditional"}
MIN_FIT_ROWS = 30
RIDGE = 1.0
SCHEMA_PRIOR = 0.5
SAMPLE_CHUNK = 500


@dataclass(frozen=True)
class GenerationStrategy:
    variant: str
    group_feature: str | None = None

    def __post_init__(self):
        variant = _ALIASES.get(self.variant, self.variant)
        if variant not in VARIANTS:
            raise ValueError(f"unknown strategy {self.variant!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "variant", variant)
        if (variant == "group_based") != (self.group_feature is not None):
            raise ValueError("group_feature is required for group_based and only allowed there")

    @property
    def short_name(self) -> str:
        return {"schema_constrained": "schema", "group_based": "group"}.get(self.variant, self.variant)


@dataclass(frozen=True, eq=False)
class GenerationRequest:
    schema: TableSchema
    n_samples: int
    strategy: GenerationStrategy
    seed_sample: DataTable
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("n_samples must be positive")
        if self.seed_sample.schema != self.schema:
            raise ValueError("seed_sample does not use the request schema")
        g = self.strategy.group_feature
        if g is not None and (g not in self.schema or self.schema[g].role != "group"):
            raise ValueError(f"group feature {g!r} must be a schema feature with role=group")


# ---------------------------------------------------------------------------
# reference model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    probs: np.ndarray

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        b = rng.choice(len(self.probs), size=n, p=self.probs)
        lo, hi = self.edges[b], self.edges[b + 1]
        return lo + (hi - lo) * rng.random(n)

    @property
    def mean(self) -> float:
        return float(np.dot(self.probs, 0.5 * (self.edges[:-1] + self.edges[1:])))


@dataclass(frozen=True)
class Frequencies:
    values: tuple[str, ...]
    probs: np.ndarray

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.values), size=n, p=self.probs)
        return np.array(self.values, dtype=object)[idx]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.values, map(float, self.probs)))


@dataclass(frozen=True)
class LinearGaussian:
    """z = intercept + weights . design[:, :len(weights)] + residual_sd * noise.

    z is the normal score of the feature; ``quantiles`` holds the sorted seed
    values that map a score back to the feature's scale.
    """

    intercept: float
    weights: np.ndarray
    residual_sd: float
    quantiles: np.ndarray

    def to_value(self, z: np.ndarray) -> np.ndarray:
        q = self.quantiles
        m = len(q)
        x = np.interp(norm.cdf(z), (np.arange(m) + 0.5) / m, q)
        if m < 4:
            return x
        # beyond the seed extremes the quantile map continues linearly in z, so tails are not cut off
        zq = norm.ppf((np.arange(m) + 0.5) / m)
        j = max(1, m // 50)
        lo, hi = z < zq[0], z > zq[-1]
        x[lo] = q[0] + (z[lo] - zq[0]) * (q[j] - q[0]) / (zq[j] - zq[0])
        x[hi] = q[-1] + (z[hi] - zq[-1]) * (q[-1] - q[-1 - j]) / (zq[-1] - zq[-1 - j])
        return x


def normal_scores(x: np.ndarray) -> np.ndarray:
    """Midrank plotting positions pushed through the standard normal quantile function."""
    return norm.ppf((rankdata(x) - 0.5) / len(x))


@dataclass(frozen=True)
class Logistic:
    intercept: float
    weights: np.ndarray


@dataclass(frozen=True)
class DesignColumn:
    feature: str
    value: str | None  # category for a dummy column, None for a continuous column
    mean: float = 0.0
    sd: float = 1.0


@dataclass(frozen=True)
class Component:
    marginals: dict
    conditionals: dict
    n_rows: int


@dataclass(frozen=True, eq=False)
class ReferenceModel:
    schema: TableSchema
    strategy: GenerationStrategy
    design: tuple[DesignColumn, ...]
    prefix: dict[str, int]
    components: dict
    group_weights: dict
    flags: tuple[str, ...] = ()
    decimals: dict = field(default_factory=dict)

    @property
    def variant(self) -> str:
        return self.strategy.variant


def fd_histogram(x: np.ndarray) -> Histogram:
    """Histogram with Freedman-Diaconis bin width and a one-bin floor."""
    x = np.asarray(x, dtype=float)
    lo, hi = float(x.min()), float(x.max())
    q75, q25 = np.percentile(x, [75, 25])
    width = 2 * (q75 - q25) * len(x) ** (-1 / 3)
    if hi == lo:
        return Histogram(np.array([lo, hi]), np.array([1.0]))
    n_bins = 1 if width <= 0 else max(1, int(math.ceil((hi - lo) / width)))
    counts, edges = np.histogram(x, bins=n_bins, range=(lo, hi))
    return Histogram(edges, counts / counts.sum())


def _frequencies(spec: FeatureSpec, col: np.ndarray, prior: float) -> Frequencies:
    counts = Counter(v for v in col if v != "")
    values = spec.allowed_values if prior > 0 else tuple(v for v in spec.allowed_values if counts[v])
    mass = np.array([counts[v] + prior for v in values], dtype=float)
    return Frequencies(values, mass / mass.sum())


def _design_spec(seed: DataTable) -> tuple[tuple[DesignColumn, ...], dict[str, int]]:
    cols: list[DesignColumn] = []
    prefix = {}
    for spec in seed.schema:
        prefix[spec.name] = len(cols)
        col = seed.columns[spec.name]
        if spec.is_continuous:
            obs = col[~np.isnan(col)]
            mean = float(obs.mean()) if obs.size else 0.0
            sd = float(obs.std()) if obs.size > 1 else 0.0
            cols.append(DesignColumn(spec.name, None, mean, sd if sd > 0 else 1.0))
        else:
            for v in spec.allowed_values[1:]:
                cols.append(DesignColumn(spec.name, v))
    return tuple(cols), prefix


def _design_block(spec: FeatureSpec, col: np.ndarray, design: Sequence[DesignColumn], fill) -> np.ndarray:
    dcols = [d for d in design if d.feature == spec.name]
    if spec.is_continuous:
        d = dcols[0]
        x = np.where(np.isnan(col), d.mean, col)
        return ((x - d.mean) / d.sd)[:, None]
    filled = np.where(col == "", fill, col)
    return np.column_stack([(filled == d.value).astype(float) for d in dcols]) if dcols \
        else np.empty((len(col), 0))


def _ridge(X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray, float]:
    m, q = X.shape
    xbar = X.mean(axis=0) if q else np.empty(0)
    ybar = float(y.mean())
    Xc = X - xbar
    w = np.linalg.solve(Xc.T @ Xc + RIDGE * np.eye(q), Xc.T @ (y - ybar)) if q else np.empty(0)
    resid = y - ybar - Xc @ w
    dof = max(1, m - q - 1)
    return ybar - float(xbar @ w), w, float(np.sqrt(resid @ resid / dof))


def fit_logistic(X: np.ndarray, y: np.ndarray, n_iter: int = 50) -> tuple[float, np.ndarray]:
    """Ridge-penalised logistic regression by Newton-Raphson (intercept unpenalised)."""
    m, q = X.shape
    A = np.column_stack([np.ones(m), X])
    beta = np.zeros(q + 1)
    beta[0] = math.log(max(y.mean(), 1e-6) / max(1 - y.mean(), 1e-6))
    pen = np.full(q + 1, RIDGE)
    pen[0] = 0.0
    for _ in range(n_iter):
        p = expit(A @ beta)
        grad = A.T @ (p - y) + pen * beta
        H = (A * (p * (1 - p))[:, None]).T @ A + np.diag(pen) + 1e-9 * np.eye(q + 1)
        step = np.linalg.solve(H, grad)
        beta -= step
        if np.max(np.abs(step)) < 1e-8:
            break
    return float(beta[0]), beta[1:]


def _fit_component(table: DataTable, strategy: GenerationStrategy, design, prefix, D: np.ndarray,
                   fallback: Component | None, flags: list[str], tag: str) -> Component:
    schema = table.schema
    joint = strategy.variant in ("conditional", "group_based")
    prior = SCHEMA_PRIOR if strategy.variant == "schema_constrained" else 0.0
    marginals, conditionals = {}, {}
    label = schema.label.name
    for spec in schema:
        col = table.columns[spec.name]
        observed = ~table.missing(spec.name)
        n_obs = int(observed.sum())
        if n_obs == 0:
            if fallback is None:
                raise ValueError(f"feature {spec.name!r} has no observed values in the seed sample")
            marginals[spec.name] = fallback.marginals[spec.name]
            flags.append(f"{tag}{spec.name}: no observed values, pooled marginal used")
            continue
        if spec.is_continuous:
            marginals[spec.name] = fd_histogram(col[observed])
        else:
            marginals[spec.name] = _frequencies(spec, col, prior)
        if not joint or prefix[spec.name] == 0:
            continue
        if spec.is_continuous or (spec.name == label and spec.kind == "binary"):
            if n_obs < MIN_FIT_ROWS:
                flags.append(f"{tag}{spec.name}: {n_obs} observed rows, marginal-only fit")
                continue
            X = D[observed, : prefix[spec.name]]
            if spec.is_continuous:
                v = col[observed]
                conditionals[spec.name] = LinearGaussian(*_ridge(X, normal_scores(v)), np.sort(v))
            else:
                y = (col[observed] == spec.positive_value).astype(float)
                if 0 < y.sum() < len(y):
                    conditionals[spec.name] = Logistic(*fit_logistic(X, y))
    return Component(marginals, conditionals, table.n_rows)


def _full_design(table: DataTable, design, fills) -> np.ndarray:
    blocks = [_design_block(spec, table.columns[spec.name], design, fills.get(spec.name))
              for spec in table.schema]
    return np.hstack(blocks) if blocks else np.empty((table.n_rows, 0))


def _modes(table: DataTable) -> dict[str, str]:
    out = {}
    for spec in table.schema:
        if not spec.is_continuous:
            c = Counter(v for v in table.columns[spec.name] if v != "")
            out[spec.name] = max(spec.allowed_values, key=lambda v: (c[v], -spec.allowed_values.index(v)))
    return out


def observed_decimals(x: np.ndarray, max_decimals: int = 4) -> int:
    """Fewest decimals that reproduce every observed value (capped)."""
    x = x[~np.isnan(x)]
    for d in range(max_decimals):
        if np.allclose(x, np.round(x, d), rtol=0, atol=1e-9):
            return d
    return max_decimals


def observed_groups(table: DataTable, feature: str) -> list[str]:
    spec = table.schema[feature]
    seen = set(table.columns[feature]) - {""}
    return [v for v in spec.allowed_values if v in seen]


def fit_reference(seed_sample: DataTable, strategy: GenerationStrategy) -> ReferenceModel:
    """Fit the reference generator for ``strategy`` on the seed rows."""
    if seed_sample.n_rows == 0:
        raise ValueError("seed sample is empty")
    flags: list[str] = []
    design, prefix = _design_spec(seed_sample)
    fills = _modes(seed_sample)
    D = _full_design(seed_sample, design, fills)
    pooled = _fit_component(seed_sample, strategy if strategy.variant != "group_based"
                            else GenerationStrategy("conditional"), design, prefix, D, None, flags, "")
    components = {None: pooled}
    weights = {None: 1.0}
    if strategy.variant == "group_based":
        groups = observed_groups(seed_sample, strategy.group_feature)
        if len(groups) < 2:
            flags.append(f"group feature {strategy.group_feature!r} has {len(groups)} observed value(s); "
                         "degenerated to conditional")
        else:
            gcol = seed_sample.columns[strategy.group_feature]
            components, weights = {}, {}
            for g in groups:
                rows = np.flatnonzero(gcol == g)
                components[g] = _fit_component(seed_sample.take(rows), strategy, design, prefix, D[rows],
                                               pooled, flags, f"[{g}] ")
                weights[g] = 1.0 / len(groups)
    decimals = {f.name: observed_decimals(seed_sample.columns[f.name])
                for f in seed_sample.schema if f.is_continuous}
    return ReferenceModel(seed_sample.schema, strategy, design, prefix, components, weights, tuple(flags),
                          decimals)


def group_quota(n: int, groups: Sequence) -> dict:
    """Split ``n`` as evenly as integers allow; earlier groups take the remainder."""
    base, extra = divmod(n, len(groups))
    return {g: base + (1 if i < extra else 0) for i, g in enumerate(groups)}


def _sample_component(model: ReferenceModel, comp: Component, n: int, rng: np.random.Generator,
                      forced: dict[str, str]) -> dict[str, np.ndarray]:
    design = model.design
    D = np.empty((n, len(design)))
    out: dict[str, np.ndarray] = {}
    for spec in model.schema:
        start = model.prefix[spec.name]
        cond = comp.conditionals.get(spec.name)
        if spec.name in forced:
            x = np.full(n, forced[spec.name], dtype=object)
        elif isinstance(cond, LinearGaussian):
            mu = cond.intercept + D[:, : len(cond.weights)] @ cond.weights
            x = cond.to_value(mu + cond.residual_sd * rng.standard_normal(n))
        elif isinstance(cond, Logistic):
            p = expit(cond.intercept + D[:, : len(cond.weights)] @ cond.weights)
            x = np.where(rng.random(n) < p, spec.positive_value, spec.allowed_values[0]).astype(object)
        else:
            x = comp.marginals[spec.name].sample(n, rng)
        if spec.is_continuous:
            # samples carry the precision seen in the seed (integer scores stay integers)
            x = np.round(np.asarray(x, dtype=float), model.decimals.get(spec.name, 4))
            if spec.range is not None:
                x = np.clip(x, *spec.range)
        out[spec.name] = x
        block = _design_block(spec, x, design, None)
        D[:, start: start + block.shape[1]] = block
    return out


def sample_quota(model: ReferenceModel, quota: dict, rng_seed: int) -> DataTable:
    """Draw ``quota[g]`` rows from each component (key None = the pooled model).

    Rows come in fixed-size chunks, each on its own random stream, so a larger
    quota under the same seed extends a smaller one instead of redrawing it.
    """
    parts = []
    keys = list(model.components)
    for g, n in quota.items():
        if n <= 0:
            continue
        comp = model.components[g]
        forced = {model.strategy.group_feature: g} if g is not None else {}
        for c in range(0, n, SAMPLE_CHUNK):
            rng = np.random.default_rng([rng_seed, keys.index(g), c // SAMPLE_CHUNK])
            parts.append(_sample_component(model, comp, min(SAMPLE_CHUNK, n - c), rng, forced))
    if not parts:
        return empty_table(model.schema)
    cols = {name: np.concatenate([p[name] for p in parts]) for name in model.schema.names}
    order = np.random.default_rng([rng_seed, len(quota)]).permutation(len(cols[model.schema.names[0]]))
    return DataTable.from_columns(model.schema, {k: v[order] for k, v in cols.items()})


def default_quota(model: ReferenceModel, n: int) -> dict:
    return group_quota(n, list(model.components))


def sample(model: ReferenceModel, request: GenerationRequest) -> DataTable:
    """Exactly ``request.n_samples`` schema-valid rows, deterministic in ``rng_seed``."""
    if model.variant != request.strategy.variant or model.schema != request.schema:
        raise ValueError("model was fitted for a different strategy or schema")
    return sample_quota(model, default_quota(model, request.n_samples), request.rng_seed)


# ---------------------------------------------------------------------------
# backends and the generation loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RowReject:
    reasons: tuple[CellViolation, ...]
    raw: str = ""

    def to_dict(self) -> dict:
        return {"reasons": [r.to_dict() for r in self.reasons], "raw": self.raw}


@dataclass
class Proposal:
    rows: DataTable
    rejects: list[RowReject] = field(default_factory=list)
    transcripts: list[dict] = field(default_factory=list)


class GeneratorBackend(Protocol):
    name: str

    def propose(self, request: GenerationRequest, quota: dict, attempt: int) -> Proposal:
        """Return candidate rows for the per-group ``quota`` (key None when ungrouped)."""


class ReferenceBackend:
    """Offline statistical backend; every proposed row is valid by construction."""

    name = "reference"

    def __init__(self):
        self._cache: tuple | None = None

    def model_for(self, request: GenerationRequest) -> ReferenceModel:
        key = (id(request.seed_sample), request.strategy)
        if self._cache is None or self._cache[0] != key:
            self._cache = (key, fit_reference(request.seed_sample, request.strategy))
        return self._cache[1]

    def propose(self, request: GenerationRequest, quota: dict, attempt: int) -> Proposal:
        model = self.model_for(request)
        if model.variant == "group_based" and None not in model.components:
            quota = {g: n for g, n in quota.items() if g in model.components}
        else:
            quota = {None: sum(quota.values())}
        seed = request.rng_seed + 1_000_003 * attempt
        return Proposal(sample_quota(model, quota, seed),
                        transcripts=[{"backend": self.name, "attempt": attempt, "seed": seed,
                                      "flags": list(model.flags)}])


class CopyBackend:
    """Worst-case leakage fixture: proposes seed rows verbatim, in shuffled order.

    Each group's seed rows are used once before any repeats.
    """

    name = "copy"

    def propose(self, request: GenerationRequest, quota: dict, attempt: int) -> Proposal:
        seed = request.seed_sample
        rng = np.random.default_rng([request.rng_seed, attempt])
        gfeat = request.strategy.group_feature
        picks = []
        for g, n in quota.items():
            pool = np.flatnonzero(seed.columns[gfeat] == g) if g is not None and gfeat else np.arange(seed.n_rows)
            if pool.size == 0 or n <= 0:
                continue
            reps = -(-n // pool.size)
            picks.append(np.concatenate([rng.permutation(pool) for _ in range(reps)])[:n])
        idx = np.concatenate(picks) if picks else np.empty(0, dtype=int)
        return Proposal(seed.take(idx), transcripts=[{"backend": self.name, "attempt": attempt}])


@dataclass
class GenerationLog:
    backend: str
    strategy: str
    n_requested: int
    rng_seed: int
    status: str = "ok"
    n_valid: int = 0
    n_rejected: int = 0
    n_surplus: int = 0
    attempts: list[dict] = field(default_factory=list)
    rejections_by_feature: dict = field(default_factory=dict)
    transcripts: list[dict] = field(default_factory=list)
    message: str = ""

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str)


def request_groups(request: GenerationRequest) -> list:
    if request.strategy.variant != "group_based":
        return [None]
    groups = observed_groups(request.seed_sample, request.strategy.group_feature)
    return groups if len(groups) >= 2 else [None]


def generate(request: GenerationRequest, backend: GeneratorBackend,
             max_retries: int = 5) -> tuple[DataTable, GenerationLog]:
    """Collect exactly ``n_samples`` valid rows, re-querying for shortfall.

    The backend is re-prompted at most ``max_retries`` times after the first
    round. On exhaustion the partial table is returned with status
    ``"exhausted"``.
    """
    groups = request_groups(request)
    quota = group_quota(request.n_samples, groups)
    have = {g: 0 for g in groups}
    accepted: list[DataTable] = []
    gfeat = request.strategy.group_feature if groups != [None] else None
    log = GenerationLog(backend.name, request.strategy.variant, request.n_samples, request.rng_seed)
    by_feature: dict = defaultdict(Counter)
    for attempt in range(1 + max_retries):
        need = {g: quota[g] - have[g] for g in groups if quota[g] > have[g]}
        if not need:
            break
        proposal = backend.propose(request, need, attempt)
        rows = proposal.rows
        keep = np.zeros(rows.n_rows, dtype=bool)
        labels = rows.columns[gfeat] if gfeat else None
        for i in range(rows.n_rows):
            g = labels[i] if gfeat else None
            if need.get(g, 0) > 0:
                need[g] -= 1
                have[g] += 1
                keep[i] = True
        surplus = int((~keep).sum())
        if keep.any():
            accepted.append(rows.take(np.flatnonzero(keep)))
        for rej in proposal.rejects:
            for r in rej.reasons:
                by_feature[r.feature or "<row>"][r.code] += 1
        log.n_rejected += len(proposal.rejects)
        log.n_surplus += surplus
        log.transcripts.extend(proposal.transcripts)
        log.attempts.append({"attempt": attempt, "requested": {str(k): v for k, v in need.items()},
                             "proposed": rows.n_rows + len(proposal.rejects),
                             "accepted": int(keep.sum()), "rejected": len(proposal.rejects),
                             "surplus": surplus})
    table = concat(accepted) if accepted else empty_table(request.schema)
    log.n_valid = table.n_rows
    log.rejections_by_feature = {k: dict(sorted(v.items())) for k, v in sorted(by_feature.items())}
    if table.n_rows < request.n_samples:
        log.status = "exhausted"
        log.message = (f"backend produced {table.n_rows} of {request.n_samples} valid rows "
                       f"within {1 + max_retries} rounds")
    return table, log


# ---------------------------------------------------------------------------
# controlled degradation
# ---------------------------------------------------------------------------


def degrade(table: DataTable, severity_per_feature: dict[str, float], rng_seed: int) -> DataTable:
    """Emulate generator drift on selected features.

    A continuous feature with factor f becomes ``x + f*sd + f*sd*noise``
    (mean shift plus variance inflation), clipped to its declared range so the
    result stays schema-valid. A categorical feature has each cell replaced by
    a uniform draw over its allowed values with probability ``min(1, f)``.
    Missing cells stay missing; factor 0 leaves a column untouched.
    """
    unknown = [k for k in severity_per_feature if k not in table.schema]
    if unknown:
        raise KeyError(f"unknown feature names: {unknown}")
    if any(f < 0 for f in severity_per_feature.values()):
        raise ValueError("shift factors must be non-negative")
    cols = dict(table.columns)
    for k, name in enumerate(table.schema.names):
        f = float(severity_per_feature.get(name, 0.0))
        if f == 0:
            continue
        rng = np.random.default_rng([rng_seed, k])
        spec = table.schema[name]
        col = table.columns[name]
        miss = table.missing(name)
        if spec.is_continuous:
            sd = float(np.nanstd(col)) if (~miss).sum() > 1 else 0.0
            x = col + f * sd + f * sd * rng.standard_normal(len(col))
            if spec.range is not None:
                x = np.clip(x, *spec.range)
            x[miss] = np.nan
        else:
            swap = (rng.random(len(col)) < min(1.0, f)) & ~miss
            draws = np.array(spec.allowed_values, dtype=object)[rng.integers(len(spec.allowed_values),
                                                                               size=len(col))]
            x = np.where(swap, draws, col)
        cols[name] = x
    return DataTable.from_columns(table.schema, cols)
