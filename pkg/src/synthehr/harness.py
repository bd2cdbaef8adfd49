"""Declarative experiment sweeps: cells over (strategy, feature count, sample size).

A run partitions the real table once into a generator seed set (the
membership-attack members), a pool of held-out non-members and a real test
set. Features are ranked by an importance model trained on real data. Every
cell then generates a synthetic table, scores fidelity, utility and privacy,
and persists all of it under ``output_dir/cells/<cell_id>/``. A cell whose
``result.json`` exists is skipped on re-runs; failed cells leave
``error.json`` and are retried next time.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import shutil
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import fidelity
from .gbm import GbmConfig, GbmModel, save_model, top_k_features, train
from .generators import CopyBackend, GenerationRequest, GenerationStrategy, ReferenceBackend, degrade, generate
from .privacy import attack_feature_csv, mia_experiment
from .schema import DataTable, concat, load_schema, load_table, select_features, split, write_table
from .utility import evaluate_model

MASTER_COLUMNS = ("cell_id", "arm", "strategy", "n_features", "n_samples", "scenario", "status",
                  "avg_kl", "avg_kl_all", "auroc", "auroc_lo", "auroc_hi", "auprc", "auprc_lo", "auprc_hi",
                  "mia_auroc", "mia_advantage", "risk_member", "risk_nonmember", "risk_gap", "error")
SCENARIOS = ("within", "across")
BACKENDS = ("reference", "remote", "copy")
BUILTIN_CONFIGS = {"paper-trends": "paper_trends.json"}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RemoteSettings:
    endpoint: str = "http://127.0.0.1:8000/v1"
    model: str = "default"
    temperature: float = 0.7
    max_tokens: int = 4096
    cache_dir: str | None = None
    batch_size: int = 50
    block_size: int = 5
    max_exemplars: int = 50
    max_retries: int = 4
    backoff_s: float = 0.5
    max_in_flight: int = 4


@dataclass(frozen=True)
class DegradeSettings:
    """Severity for the column at index i of a cell's table is ``slope * i``.

    Columns are indexed in selection order (most important first) starting
    at 0; with ``include_label`` the label is the last column, index k. The
    group column is never degraded, so group quotas survive.
    """

    slope: float
    include_label: bool = True

    def severities(self, columns: Sequence[str], label: str) -> dict[str, float]:
        sev = {c: self.slope * i for i, c in enumerate(columns)}
        if self.include_label:
            sev[label] = self.slope * len(columns)
        return sev


@dataclass(frozen=True)
class Arm:
    name: str
    strategies: tuple[str, ...]
    feature_counts: tuple[int, ...]
    sample_sizes: tuple[int, ...]
    degrade: DegradeSettings | None = None
    backend: str = "reference"


@dataclass(frozen=True)
class ExperimentConfig:
    real_data: object
    schema: str | None
    arms: tuple[Arm, ...]
    output_dir: str
    group_feature: str | None = None
    gbm: GbmConfig = GbmConfig()
    importance_gbm: GbmConfig = GbmConfig(n_trees=100)
    bins: int = fidelity.DEFAULT_BINS
    epsilon: float = fidelity.DEFAULT_EPSILON
    n_boot: int = 1000
    rng_seed: int = 0
    seed_rows: int = 2000
    test_fraction: float = 0.3
    max_retries: int = 5
    mia_attack: str = "threshold"
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    remote: RemoteSettings = RemoteSettings()
    base_dir: str = "."

    def __post_init__(self):
        if not self.arms:
            raise ConfigError("config defines no sweep")
        for arm in self.arms:
            for key in ("strategies", "feature_counts", "sample_sizes"):
                if not getattr(arm, key):
                    raise ConfigError(f"arm {arm.name!r}: {key} must be non-empty")
            if any(k <= 0 for k in arm.feature_counts) or any(n <= 0 for n in arm.sample_sizes):
                raise ConfigError(f"arm {arm.name!r}: counts must be positive")
            if arm.backend not in BACKENDS:
                raise ConfigError(f"arm {arm.name!r}: backend must be one of {BACKENDS}")
            for s in arm.strategies:
                if GenerationStrategy(s, self.group_feature if _is_group(s) else None).variant == "group_based" \
                        and not self.group_feature:
                    raise ConfigError("group strategies need group_feature")
        if self.n_boot < 1 or self.workers < 1 or self.seed_rows < 30:
            raise ConfigError("n_boot and workers must be >= 1, seed_rows >= 30")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def _is_group(s: str) -> bool:
    return s in ("group", "group_based")


def _gbm(d: dict | None, default: GbmConfig) -> GbmConfig:
    return replace(default, **(d or {}))


def _arm(d: dict, top: dict, idx: int) -> Arm:
    merged = {**{k: top.get(k) for k in ("strategies", "feature_counts", "sample_sizes", "degrade", "backend")},
              **d}
    deg = merged.get("degrade")
    return Arm(str(merged.get("name", f"arm{idx}")), tuple(merged.get("strategies") or ()),
               tuple(int(x) for x in merged.get("feature_counts") or ()),
               tuple(int(x) for x in merged.get("sample_sizes") or ()),
               DegradeSettings(**deg) if deg else None, merged.get("backend") or "reference")


def config_from_dict(d: dict, base_dir: str | os.PathLike = ".") -> ExperimentConfig:
    known = {"real_data", "schema", "arms", "strategies", "feature_counts", "sample_sizes", "degrade", "backend",
             "output_dir", "group_feature", "gbm", "importance_gbm", "bins", "epsilon", "n_boot", "rng_seed",
             "seed_rows", "test_fraction", "max_retries", "mia_attack", "workers", "remote", "description"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "real_data" not in d:
        raise ConfigError("config needs real_data")
    arms = tuple(_arm(a, d, i) for i, a in enumerate(d["arms"])) if d.get("arms") else (_arm({"name": "main"}, d, 0),)
    names = [a.name for a in arms]
    if len(set(names)) != len(names):
        raise ConfigError("arm names must be unique")
    return ExperimentConfig(
        real_data=d["real_data"], schema=d.get("schema"), arms=arms, output_dir=d.get("output_dir", "results"),
        group_feature=d.get("group_feature"), gbm=_gbm(d.get("gbm"), GbmConfig()),
        importance_gbm=_gbm(d.get("importance_gbm"), GbmConfig(n_trees=100)),
        bins=int(d.get("bins", fidelity.DEFAULT_BINS)), epsilon=float(d.get("epsilon", fidelity.DEFAULT_EPSILON)),
        n_boot=int(d.get("n_boot", 1000)), rng_seed=int(d.get("rng_seed", 0)),
        seed_rows=int(d.get("seed_rows", 2000)), test_fraction=float(d.get("test_fraction", 0.3)),
        max_retries=int(d.get("max_retries", 5)), mia_attack=d.get("mia_attack", "threshold"),
        workers=int(d.get("workers") or os.cpu_count() or 1), remote=RemoteSettings(**(d.get("remote") or {})), base_dir=str(base_dir))


def load_config(path_or_name: str | os.PathLike) -> ExperimentConfig:
    """Read a JSON config file, or a built-in config by name (e.g. ``paper-trends``)."""
    name = str(path_or_name)
    if name in BUILTIN_CONFIGS:
        text = resources.files("synthehr.data").joinpath(BUILTIN_CONFIGS[name]).read_text(encoding="utf-8")
        return config_from_dict(json.loads(text), base_dir=".")
    path = Path(name)
    return config_from_dict(json.loads(path.read_text(encoding="utf-8")), base_dir=path.parent)


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    arm: str
    strategy: str
    n_features: int
    n_samples: int
    backend: str
    seed: int
    degrade: DegradeSettings | None = None

    @property
    def key(self) -> dict:
        return {"strategy": self.strategy, "features": self.n_features, "samples": self.n_samples,
                "backend": self.backend, "seed": self.seed,
                "degrade": asdict(self.degrade) if self.degrade else None}

    @property
    def cell_id(self) -> str:
        digest = hashlib.sha256(json.dumps(self.key, sort_keys=True).encode()).hexdigest()[:10]
        return f"{self.strategy}-f{self.n_features}-n{self.n_samples}-{digest}"

    @property
    def rng_seed(self) -> int:
        # sample size is left out so cells differing only in size share random streams
        key = {k: v for k, v in self.key.items() if k != "samples"}
        return int(hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:8], 16) % (2 ** 31)


def plan_cells(config: ExperimentConfig) -> list[Cell]:
    """Cells in config order (arm, strategy, feature count, sample size); duplicates collapse."""
    out, seen = [], set()
    for arm in config.arms:
        for s in arm.strategies:
            short = GenerationStrategy(s, config.group_feature if _is_group(s) else None).short_name
            for k in arm.feature_counts:
                for n in arm.sample_sizes:
                    c = Cell(arm.name, short, k, n, arm.backend, config.rng_seed, arm.degrade)
                    if c.cell_id not in seen:
                        seen.add(c.cell_id)
                        out.append(c)
    return out


@dataclass(frozen=True, eq=False)
class RunContext:
    """Everything shared by cells: partitions of the real table and the feature ranking."""

    seed: DataTable
    nonmembers: DataTable
    test: DataTable
    ranking: tuple[str, ...]


def load_real(config: ExperimentConfig) -> DataTable:
    spec = config.real_data
    if isinstance(spec, dict) and "simulate" in spec:
        from .simulate import simulate_cohort
        return simulate_cohort(**spec["simulate"])
    if config.schema is None:
        raise ConfigError("a CSV real_data needs a schema path")
    return load_table(config.resolve(str(spec)), load_schema(config.resolve(config.schema)))


def prepare_context(config: ExperimentConfig, real: DataTable | None = None) -> RunContext:
    real = real if real is not None else load_real(config)
    if config.group_feature and config.group_feature not in real.schema:
        raise ConfigError(f"group feature {config.group_feature!r} is not in the schema")
    pool, test = split(real, 1 - config.test_fraction, config.rng_seed)
    if pool.n_rows < config.seed_rows + 30:
        raise ConfigError(f"real pool of {pool.n_rows} rows cannot supply {config.seed_rows} seed rows "
                          "plus 30 non-members")
    order = np.random.default_rng([config.rng_seed, 1]).permutation(pool.n_rows)
    seed = pool.take(np.sort(order[: config.seed_rows]))
    nonmembers = pool.take(np.sort(order[config.seed_rows:]))
    covariates = [f.name for f in real.schema.covariates if f.name != config.group_feature]
    model = train(pool, config.importance_gbm, covariates)
    ranking = tuple(top_k_features(model, len(covariates)))
    return RunContext(seed, nonmembers, test, ranking)


def _backend(cell: Cell, config: ExperimentConfig, cell_dir: Path):
    if cell.backend == "reference":
        return ReferenceBackend()
    if cell.backend == "copy":
        return CopyBackend()
    from .llm import LLMClient, RemoteBackend
    r = config.remote
    client = LLMClient(r.endpoint, cache_dir=config.resolve(r.cache_dir) if r.cache_dir else None,
                       max_retries=r.max_retries, backoff_s=r.backoff_s, max_in_flight=r.max_in_flight,
                       transcript_path=cell_dir / "transcripts.jsonl")
    return RemoteBackend(client, r.model, r.temperature, r.max_tokens, r.batch_size, r.block_size,
                         r.max_exemplars)


def _strategy(cell: Cell, config: ExperimentConfig) -> GenerationStrategy:
    return GenerationStrategy(cell.strategy, config.group_feature if _is_group(cell.strategy) else None)


def cell_columns(cell: Cell, config: ExperimentConfig, ctx: RunContext) -> tuple[list[str], list[str]]:
    if cell.n_features > len(ctx.ranking):
        raise ConfigError(f"{cell.n_features} features requested, only {len(ctx.ranking)} available")
    selected = list(ctx.ranking[: cell.n_features])
    columns = ([config.group_feature] if config.group_feature else []) + selected
    return selected, columns


def generate_cell(cell: Cell, config: ExperimentConfig, ctx: RunContext, cell_dir: Path):
    """Generate (and degrade, if configured) one cell's synthetic table; returns (table, log, selected)."""
    selected, columns = cell_columns(cell, config, ctx)
    seed = select_features(ctx.seed, columns)
    request = GenerationRequest(seed.schema, cell.n_samples, _strategy(cell, config), seed, cell.rng_seed)
    table, log = generate(request, _backend(cell, config, cell_dir), config.max_retries)
    cell_dir.mkdir(parents=True, exist_ok=True)
    (cell_dir / "generation_log.json").write_text(log.to_json(), encoding="utf-8")
    if log.status != "ok":
        raise RuntimeError(f"generation failed: {log.message}")
    if cell.degrade:
        table = degrade(table, cell.degrade.severities(selected, table.schema.label.name), cell.rng_seed + 1)
    write_table(cell_dir / "synthetic.csv", table)
    return table, log, selected


def _f(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def run_cell(cell: Cell, config: ExperimentConfig, ctx: RunContext, out_dir: Path) -> dict:
    """Compute and persist one cell; returns the result record also written to result.json."""
    cell_dir = out_dir / "cells" / cell.cell_id
    if cell_dir.exists():
        shutil.rmtree(cell_dir)
    cell_dir.mkdir(parents=True)
    (cell_dir / "cell.json").write_text(json.dumps({"cell_id": cell.cell_id, "arm": cell.arm, **cell.key},
                                                   indent=2), encoding="utf-8")
    timings = {}
    t0 = time.perf_counter()
    synthetic, log, selected = generate_cell(cell, config, ctx, cell_dir)
    timings["generate_s"] = time.perf_counter() - t0
    _, columns = cell_columns(cell, config, ctx)
    test = select_features(ctx.test, columns)

    t0 = time.perf_counter()
    kl = fidelity.kl_table(test, synthetic, selected, config.bins, config.epsilon)
    (cell_dir / "kl.json").write_text(kl.to_json(), encoding="utf-8")
    (cell_dir / "kl.csv").write_text(kl.to_csv(), encoding="utf-8")
    if config.group_feature:
        gkl = fidelity.kl_by_group(test, synthetic, config.group_feature, config.bins, config.epsilon)
        (cell_dir / "kl_by_group.json").write_text(gkl.to_json(), encoding="utf-8")
    _write_rows(cell_dir / "hist_overlay.csv", fidelity.overlay_histograms(test, synthetic, config.bins),
                ("feature", "bin_lo", "bin_hi", "real_density", "synthetic_density"))
    timings["fidelity_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    tr, te = split(synthetic, 0.8, config.gbm.rng_seed)
    within = evaluate_model(train(tr, config.gbm), te, "within", tr.n_rows, config.n_boot, cell.rng_seed)
    target = train(synthetic, config.gbm)
    across = evaluate_model(target, test, "across", synthetic.n_rows, config.n_boot, cell.rng_seed)
    save_model(cell_dir / "model.json", target)
    for r in (within, across):
        (cell_dir / f"eval_{r.scenario}.json").write_text(r.to_json(), encoding="utf-8")
    timings["utility_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    seed = select_features(ctx.seed, columns)
    real = concat([seed, select_features(ctx.nonmembers, columns)])
    mia, setup = mia_experiment(real, synthetic, config.gbm, cell.rng_seed, np.arange(seed.n_rows),
                                config.mia_attack, target=target)
    (cell_dir / "mia.json").write_text(mia.to_json(), encoding="utf-8")
    (cell_dir / "attack_features.csv").write_text(attack_feature_csv(setup), encoding="utf-8")
    timings["privacy_s"] = time.perf_counter() - t0
    (cell_dir / "timing.json").write_text(json.dumps(timings, indent=2), encoding="utf-8")

    rows = []
    for r in (within, across):
        rows.append({"cell_id": cell.cell_id, "arm": cell.arm, "strategy": cell.strategy,
                     "n_features": cell.n_features, "n_samples": cell.n_samples, "scenario": r.scenario,
                     "status": "ok", "avg_kl": kl.headline, "avg_kl_all": kl.average, "auroc": r.auroc,
                     "auroc_lo": r.auroc_ci[0], "auroc_hi": r.auroc_ci[1], "auprc": r.auprc,
                     "auprc_lo": r.auprc_ci[0], "auprc_hi": r.auprc_ci[1], "mia_auroc": mia.attack_auroc,
                     "mia_advantage": mia.membership_advantage, "risk_member": mia.empirical_risk_member,
                     "risk_nonmember": mia.empirical_risk_nonmember, "risk_gap": mia.risk_gap, "error": ""})
    result = {"cell_id": cell.cell_id, "status": "ok", "rows": rows, "timings": timings}
    (cell_dir / "result.json").write_text(json.dumps(result, indent=2), encoding="utf-8")
    return result


def _failed_rows(cell: Cell, message: str) -> list[dict]:
    base = {k: "" for k in MASTER_COLUMNS}
    return [{**base, "cell_id": cell.cell_id, "arm": cell.arm, "strategy": cell.strategy,
             "n_features": cell.n_features, "n_samples": cell.n_samples, "scenario": s, "status": "failed",
             "error": message} for s in SCENARIOS]


def _cell_worker(args) -> dict:
    cell, config, ctx, out_dir = args
    try:
        return run_cell(cell, config, ctx, Path(out_dir))
    except Exception as exc:  # a failed cell must not stop the sweep
        cell_dir = Path(out_dir) / "cells" / cell.cell_id
        cell_dir.mkdir(parents=True, exist_ok=True)
        message = f"{type(exc).__name__}: {exc}"
        err = {"cell_id": cell.cell_id, "status": "failed", "error": message,
               "traceback": traceback.format_exc(), "rows": _failed_rows(cell, message)}
        (cell_dir / "error.json").write_text(json.dumps(err, indent=2), encoding="utf-8")
        return err


def _write_rows(path: Path, rows: Iterable[dict], columns: Sequence[str]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _f(r.get(k)) for k in columns})
    path.write_text(buf.getvalue(), encoding="utf-8")


@dataclass
class RunResult:
    output_dir: Path
    cells: list[Cell]
    results: dict[str, dict]
    computed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    @property
    def rows(self) -> list[dict]:
        return [r for c in self.cells if c.cell_id in self.results for r in self.results[c.cell_id]["rows"]]

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.results.items() if v["status"] != "ok"]

    @property
    def master_csv(self) -> Path:
        return self.output_dir / "master.csv"


def _write_master(out_dir: Path, cells: list[Cell], results: dict[str, dict]) -> None:
    rows = [r for c in cells if c.cell_id in results for r in results[c.cell_id]["rows"]]
    _write_rows(out_dir / "master.csv", rows, MASTER_COLUMNS)
    timing_rows = [{"cell_id": c.cell_id, **results[c.cell_id].get("timings", {})}
                   for c in cells if c.cell_id in results]
    _write_rows(out_dir / "timings.csv", timing_rows,
                ("cell_id", "generate_s", "fidelity_s", "utility_s", "privacy_s"))


def run(config: ExperimentConfig, output_dir: str | os.PathLike | None = None,
        real: DataTable | None = None) -> RunResult:
    """Run every cell of the sweep; completed cells already on disk are reused."""
    out = Path(output_dir) if output_dir is not None else config.resolve(config.output_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    cells = plan_cells(config)
    ctx = prepare_context(config, real)
    (out / "ranking.json").write_text(json.dumps(list(ctx.ranking), indent=2), encoding="utf-8")
    (out / "cells.json").write_text(json.dumps([{"cell_id": c.cell_id, "arm": c.arm, **c.key} for c in cells],
                                               indent=2), encoding="utf-8")
    results: dict[str, dict] = {}
    todo = []
    for c in cells:
        done = out / "cells" / c.cell_id / "result.json"
        if done.exists():
            results[c.cell_id] = json.loads(done.read_text(encoding="utf-8"))
        else:
            todo.append(c)
    result = RunResult(out, cells, results, skipped=[c.cell_id for c in cells if c.cell_id in results])
    jobs = [(c, config, ctx, str(out)) for c in todo]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for c, res in zip(todo, pool.map(_cell_worker, jobs)):
                results[c.cell_id] = res
                result.computed.append(c.cell_id)
                _write_master(out, cells, results)
    else:
        for c, job in zip(todo, jobs):
            results[c.cell_id] = _cell_worker(job)
            result.computed.append(c.cell_id)
            _write_master(out, cells, results)
    _write_master(out, cells, results)
    return result


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


class ProvenanceError(RuntimeError):
    pass


@dataclass
class Report:
    markdown: str
    files: list[Path]
    failures: list[dict]
    exit_code: int


def read_master(out_dir: Path) -> list[dict]:
    with open(out_dir / "master.csv", newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _num(s: str) -> float:
    return float(s) if s != "" else math.nan


def verify_provenance(out_dir: Path, rows: list[dict]) -> int:
    """Check each master value against the per-cell report files; returns the number of checks."""
    checks = 0
    for r in rows:
        if r["status"] != "ok":
            continue
        d = out_dir / "cells" / r["cell_id"]
        ev = json.loads((d / f"eval_{r['scenario']}.json").read_text(encoding="utf-8"))
        kl = fidelity.KlReport.from_dict(json.loads((d / "kl.json").read_text(encoding="utf-8")))
        mia = json.loads((d / "mia.json").read_text(encoding="utf-8"))
        expected = {"avg_kl": kl.headline, "avg_kl_all": kl.average, "auroc": ev["auroc"],
                    "auroc_lo": ev["auroc_ci"][0], "auroc_hi": ev["auroc_ci"][1], "auprc": ev["auprc"],
                    "auprc_lo": ev["auprc_ci"][0], "auprc_hi": ev["auprc_ci"][1],
                    "mia_auroc": mia["attack_auroc"], "mia_advantage": mia["membership_advantage"],
                    "risk_member": mia["empirical_risk_member"], "risk_nonmember": mia["empirical_risk_nonmember"],
                    "risk_gap": mia["risk_gap"]}
        for k, v in expected.items():
            got = _num(r[k])
            if not (got == v or (math.isnan(got) and math.isnan(v))):
                raise ProvenanceError(f"{r['cell_id']}/{r['scenario']}: master {k}={r[k]} but report has {v!r}")
            checks += 1
    return checks


def _ci(r: dict, m: str) -> str:
    return f"{float(r[m]):.4f} [{float(r[m + '_lo']):.4f}, {float(r[m + '_hi']):.4f}]"


def _table(header: Sequence[str], body: list[list[str]]) -> list[str]:
    return ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)] + ["| " + " | ".join(b) + " |" for b in body]


def emit_report(output_dir: str | os.PathLike) -> Report:
    """Markdown tables plus plot-data CSVs for a finished (or partial) run."""
    out = Path(output_dir)
    rows = read_master(out)
    ok = [r for r in rows if r["status"] == "ok"]
    failures = [r for r in rows if r["status"] != "ok" and r["scenario"] == SCENARIOS[0]]
    lines = ["# Experiment report", ""]
    files: list[Path] = []
    if ok:
        n_checks = verify_provenance(out, ok)
        by_cell: dict[str, dict] = {}
        for r in ok:
            by_cell.setdefault(r["cell_id"], {})[r["scenario"]] = r
        order = list(dict.fromkeys(r["strategy"] for r in ok))
        body = []
        for s in order:
            for cid, sc in by_cell.items():
                w, a = sc.get("within"), sc.get("across")
                base = w or a
                if base["strategy"] != s:
                    continue
                body.append([base["strategy"], base["arm"], base["n_features"], base["n_samples"],
                             f"{float(base['avg_kl']):.4f}", _ci(w, "auroc") if w else "", _ci(w, "auprc") if w else "",
                             _ci(a, "auroc") if a else "", _ci(a, "auprc") if a else ""])
        lines += ["## Fidelity and utility by cell", "",
                  "AUROC / AUPRC with 95% percentile-bootstrap intervals. Avg KL is the mean over continuous "
                  "selected features (nats).", ""]
        lines += _table(["Strategy", "Arm", "Features", "Samples", "Avg KL", "Within AUROC", "Within AUPRC",
                         "Across AUROC", "Across AUPRC"], body)
        mia_rows = []
        for cid, sc in by_cell.items():
            a = sc.get("across") or sc.get("within")
            mia_rows.append({"cell_id": cid, "strategy": a["strategy"], "arm": a["arm"],
                             "n_features": a["n_features"], "n_samples": a["n_samples"],
                             "attack_auroc": a["mia_auroc"], "membership_advantage": a["mia_advantage"],
                             "risk_member": a["risk_member"], "risk_nonmember": a["risk_nonmember"],
                             "risk_gap": a["risk_gap"]})
        lines += ["", "## Membership inference", ""]
        lines += _table(["Strategy", "Arm", "Features", "Samples", "Attack AUROC", "Advantage", "Risk (member)",
                         "Risk (non-member)", "Gap"],
                        [[m["strategy"], m["arm"], m["n_features"], m["n_samples"]] +
                         [f"{float(m[k]):.4f}" for k in ("attack_auroc", "membership_advantage", "risk_member",
                                                          "risk_nonmember", "risk_gap")] for m in mia_rows])
        group_lines, group_rows = [], []
        for cid, sc in by_cell.items():
            p = out / "cells" / cid / "kl_by_group.json"
            if not p.exists():
                continue
            g = json.loads(p.read_text(encoding="utf-8"))
            a = sc.get("across") or sc.get("within")
            for gv, avg in g["averages"].items():
                group_rows.append({"cell_id": cid, "strategy": a["strategy"], "n_features": a["n_features"],
                                   "n_samples": a["n_samples"], "group_feature": g["group_feature"],
                                   "group": gv, "avg_kl": avg})
                group_lines.append([a["strategy"], a["n_features"], a["n_samples"], f"{g['group_feature']}={gv}",
                                    "" if avg is None else f"{avg:.4f}"])
        if group_lines:
            lines += ["", "## Average KL per demographic group", ""]
            lines += _table(["Strategy", "Features", "Samples", "Group", "Avg KL"], group_lines)
        plots = out / "plots"
        plots.mkdir(exist_ok=True)
        _write_rows(plots / "mia_by_features.csv", mia_rows, list(mia_rows[0]))
        files.append(plots / "mia_by_features.csv")
        if group_rows:
            _write_rows(plots / "kl_by_group.csv", group_rows, list(group_rows[0]))
            files.append(plots / "kl_by_group.csv")
        hist = []
        for cid in by_cell:
            p = out / "cells" / cid / "hist_overlay.csv"
            if p.exists():
                with open(p, newline="", encoding="utf-8") as fh:
                    hist += [{"cell_id": cid, **h} for h in csv.DictReader(fh)]
        hcols = ("cell_id", "feature", "bin_lo", "bin_hi", "real_density", "synthetic_density")
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=hcols, lineterminator="\n")
        w.writeheader()
        w.writerows(hist)
        (plots / "histograms.csv").write_text(buf.getvalue(), encoding="utf-8")
        files.append(plots / "histograms.csv")
        lines += ["", f"Provenance: {n_checks} table values matched their per-cell report files."]
    else:
        lines += ["No cell completed; no tables were produced."]
    if failures:
        lines += ["", "## Failed cells", ""]
        lines += _table(["Cell", "Strategy", "Features", "Samples", "Error"],
                        [[f["cell_id"], f["strategy"], f["n_features"], f["n_samples"],
                          f["error"].replace("|", "/")] for f in failures])
    md = "\n".join(lines) + "\n"
    (out / "report.md").write_text(md, encoding="utf-8")
    files.insert(0, out / "report.md")
    return Report(md, files, failures, 0 if ok else 1)
