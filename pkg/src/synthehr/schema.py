"""Tabular schema model, CSV ingestion/validation, splits and summaries.

Tables are stored column-wise. Continuous columns are ``float64`` arrays with
``nan`` in missing cells; categorical and binary columns are object arrays of
strings with ``""`` in missing cells. Binary features list their allowed values
as ``(negative, positive)``, so the positive class is always the last value.
"""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

KINDS = ("continuous", "categorical", "binary")
ROLES = ("covariate", "label", "group")


class SchemaError(ValueError):
    """Malformed or inconsistent schema descriptor."""


class TableError(ValueError):
    """A CSV file or table does not conform to its schema."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    role: str = "covariate"
    allowed_values: tuple[str, ...] = ()
    range: tuple[float, float] | None = None
    unit: str | None = None

    def __post_init__(self):
        if not self.name or any(c in self.name for c in ",\n\r\""):
            raise SchemaError(f"invalid feature name {self.name!r}")
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise SchemaError(f"{self.name}: unknown role {self.role!r}")
        object.__setattr__(self, "allowed_values", tuple(str(v) for v in self.allowed_values))
        if self.kind == "continuous":
            if self.allowed_values:
                raise SchemaError(f"{self.name}: continuous features take no allowed values")
        else:
            if not self.allowed_values:
                raise SchemaError(f"{self.name}: {self.kind} feature needs allowed values")
            if len(set(self.allowed_values)) != len(self.allowed_values):
                raise SchemaError(f"{self.name}: duplicate allowed values")
            if self.kind == "binary" and len(self.allowed_values) != 2:
                raise SchemaError(f"{self.name}: binary feature needs exactly two values")
            if self.range is not None:
                raise SchemaError(f"{self.name}: range only applies to continuous features")
        if self.range is not None:
            lo, hi = float(self.range[0]), float(self.range[1])
            if not lo < hi:
                raise SchemaError(f"{self.name}: range requires lo < hi, got [{lo}, {hi}]")
            object.__setattr__(self, "range", (lo, hi))

    @property
    def is_continuous(self) -> bool:
        return self.kind == "continuous"

    @property
    def positive_value(self) -> str:
        if self.kind != "binary":
            raise SchemaError(f"{self.name} is not binary")
        return self.allowed_values[1]

    def parse(self, cell: str) -> float | str | None:
        """Parse one CSV cell. Returns None for an empty cell.

        Raises ValueError with a short reason code in ``args[0]``.
        """
        cell = cell.strip()
        if cell == "":
            return None
        if self.kind == "continuous":
            try:
                value = float(cell)
            except ValueError:
                raise ValueError("parse_error") from None
            if not math.isfinite(value):
                raise ValueError("parse_error")
            if self.range is not None and not (self.range[0] <= value <= self.range[1]):
                raise ValueError("out_of_range")
            return value
        if cell in self.allowed_values:
            return cell
        # binary columns often arrive as "1.0" instead of "1"
        try:
            num = float(cell)
        except ValueError:
            raise ValueError("not_allowed") from None
        for v in self.allowed_values:
            try:
                if float(v) == num:
                    return v
            except ValueError:
                continue
        raise ValueError("not_allowed")

    def contains(self, value) -> bool:
        if self.kind == "continuous":
            if value is None or not math.isfinite(value):
                return False
            return self.range is None or self.range[0] <= value <= self.range[1]
        return value in self.allowed_values


@dataclass(frozen=True)
class TableSchema:
    features: tuple[FeatureSpec, ...]
    version: str = "unversioned"

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        names = [f.name for f in self.features]
        dupes = sorted(n for n, c in Counter(names).items() if c > 1)
        if dupes:
            raise SchemaError(f"duplicate feature names: {dupes}")
        labels = [f.name for f in self.features if f.role == "label"]
        if len(labels) != 1:
            raise SchemaError(f"schema needs exactly one label feature, found {len(labels)}")

    def __len__(self):
        return len(self.features)

    def __iter__(self) -> Iterator[FeatureSpec]:
        return iter(self.features)

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def __getitem__(self, name: str) -> FeatureSpec:
        return self.features[self.index[name]]

    @property
    def index(self) -> dict[str, int]:
        return {f.name: i for i, f in enumerate(self.features)}

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def label(self) -> FeatureSpec:
        return next(f for f in self.features if f.role == "label")

    @property
    def groups(self) -> list[FeatureSpec]:
        return [f for f in self.features if f.role == "group"]

    @property
    def covariates(self) -> list[FeatureSpec]:
        """Every feature except the label (group features included)."""
        return [f for f in self.features if f.role != "label"]

    def subset(self, names: Sequence[str]) -> "TableSchema":
        return TableSchema(tuple(self[n] for n in names), self.version)


# ---------------------------------------------------------------------------
# schema descriptor files
# ---------------------------------------------------------------------------


def _parse_schema_line(line: str, lineno: int) -> FeatureSpec:
    parts = [p.strip() for p in line.split(",")]
    if len(parts) < 3:
        raise SchemaError(f"line {lineno}: expected 'name, kind, role[, key=value...]'")
    name, kind, role = parts[:3]
    kwargs: dict = {}
    for extra in parts[3:]:
        if not extra:
            continue
        key, sep, value = extra.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise SchemaError(f"line {lineno}: expected key=value, got {extra!r}")
        if key == "range":
            lo, sep, hi = value.partition(":")
            try:
                kwargs["range"] = (float(lo), float(hi))
            except ValueError:
                raise SchemaError(f"line {lineno}: bad range {value!r}") from None
            if not sep:
                raise SchemaError(f"line {lineno}: range must be lo:hi")
        elif key == "values":
            kwargs["allowed_values"] = tuple(v.strip() for v in value.split("|"))
        elif key == "unit":
            kwargs["unit"] = value
        else:
            raise SchemaError(f"line {lineno}: unknown key {key!r}")
    try:
        return FeatureSpec(name=name, kind=kind, role=role, **kwargs)
    except SchemaError as exc:
        raise SchemaError(f"line {lineno}: {exc}") from None


def parse_schema(text: str) -> TableSchema:
    version = "unversioned"
    features = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("@version"):
            version = line[len("@version"):].strip() or version
            continue
        features.append(_parse_schema_line(line, lineno))
    if not features:
        raise SchemaError("schema descriptor declares no features")
    return TableSchema(tuple(features), version)


def load_schema(path: str | os.PathLike) -> TableSchema:
    """Read a schema descriptor (see README, "Schema descriptor format")."""
    return parse_schema(Path(path).read_text(encoding="utf-8"))


def _fmt_bound(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def format_schema(schema: TableSchema) -> str:
    lines = [f"@version {schema.version}"]
    for f in schema:
        parts = [f.name, f.kind, f.role]
        if f.range is not None:
            parts.append(f"range={_fmt_bound(f.range[0])}:{_fmt_bound(f.range[1])}")
        if f.allowed_values:
            parts.append("values=" + "|".join(f.allowed_values))
        if f.unit:
            parts.append(f"unit={f.unit}")
        lines.append(", ".join(parts))
    return "\n".join(lines) + "\n"


def write_schema(path: str | os.PathLike, schema: TableSchema) -> None:
    Path(path).write_text(format_schema(schema), encoding="utf-8")


# ---------------------------------------------------------------------------
# DataTable
# ---------------------------------------------------------------------------


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class DataTable:
    schema: TableSchema
    columns: Mapping[str, np.ndarray]
    missing_mask: np.ndarray = field(repr=False)

    @classmethod
    def from_columns(cls, schema: TableSchema, columns: Mapping[str, Iterable]) -> "DataTable":
        """Build and validate a table. ``None``/``nan``/``""`` mark missing cells."""
        cols = {}
        n = None
        for f in schema:
            if f.name not in columns:
                raise TableError("missing column", column=f.name)
            raw = columns[f.name]
            if f.is_continuous:
                arr = np.array([np.nan if v is None or v == "" else v for v in raw], dtype=float) \
                    if not isinstance(raw, np.ndarray) else np.asarray(raw, dtype=float).copy()
            else:
                arr = np.array(["" if v is None or (isinstance(v, float) and math.isnan(v)) else str(v)
                                for v in raw], dtype=object)
            if n is None:
                n = len(arr)
            elif len(arr) != n:
                raise TableError(f"column length {len(arr)} != {n}", column=f.name)
            cols[f.name] = arr
        n = n or 0
        mask = np.zeros((n, len(schema)), dtype=bool)
        for j, f in enumerate(schema):
            arr = cols[f.name]
            if f.is_continuous:
                miss = np.isnan(arr)
                if np.isinf(arr).any():
                    raise TableError("non-finite value", row=int(np.flatnonzero(np.isinf(arr))[0]), column=f.name)
                if f.range is not None:
                    bad = ~miss & ((arr < f.range[0]) | (arr > f.range[1]))
                    if bad.any():
                        raise TableError("value outside declared range", row=int(np.flatnonzero(bad)[0]),
                                         column=f.name)
            else:
                miss = arr == ""
                ok = np.isin(arr, list(f.allowed_values)) | miss
                if not ok.all():
                    i = int(np.flatnonzero(~ok)[0])
                    raise TableError(f"value {arr[i]!r} not allowed", row=i, column=f.name)
            mask[:, j] = miss
            _freeze(arr)
        return cls(schema, cols, _freeze(mask))

    @property
    def n_rows(self) -> int:
        return self.missing_mask.shape[0]

    def __len__(self):
        return self.n_rows

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def missing(self, name: str) -> np.ndarray:
        return self.missing_mask[:, self.schema.index[name]]

    def take(self, rows) -> "DataTable":
        rows = np.asarray(rows)
        cols = {k: _freeze(v[rows].copy()) for k, v in self.columns.items()}
        return DataTable(self.schema, cols, _freeze(self.missing_mask[rows].copy()))

    def rows(self) -> Iterator[dict]:
        for i in range(self.n_rows):
            yield {f.name: self.columns[f.name][i] for f in self.schema}

    def equals(self, other: "DataTable") -> bool:
        if self.schema != other.schema or self.n_rows != other.n_rows:
            return False
        for f in self.schema:
            a, b = self.columns[f.name], other.columns[f.name]
            if f.is_continuous:
                if not np.array_equal(a, b, equal_nan=True):
                    return False
            elif not np.array_equal(a, b):
                return False
        return True


def concat(tables: Sequence[DataTable]) -> DataTable:
    schema = tables[0].schema
    cols = {f.name: np.concatenate([t.columns[f.name] for t in tables]) for f in schema}
    mask = np.concatenate([t.missing_mask for t in tables], axis=0)
    return DataTable(schema, {k: _freeze(v) for k, v in cols.items()}, _freeze(mask))


def empty_table(schema: TableSchema) -> DataTable:
    return DataTable.from_columns(schema, {f.name: [] for f in schema})


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def format_value(value) -> str:
    if isinstance(value, str):
        return value
    if value is None or math.isnan(value):
        return ""
    value = float(value)
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


@dataclass(frozen=True)
class CellViolation:
    """Machine-readable reason a cell or row was rejected."""

    feature: str | None
    code: str
    detail: str = ""

    def to_dict(self) -> dict:
        return {"feature": self.feature, "code": self.code, "detail": self.detail}


def parse_row(schema: TableSchema, row: Mapping[str, str]) -> tuple[dict, list[CellViolation]]:
    """Parse and validate one record given as raw strings (absent key = missing)."""
    parsed: dict = {}
    problems = []
    for f in schema:
        cell = row.get(f.name, "")
        try:
            parsed[f.name] = f.parse(cell if cell is not None else "")
        except ValueError as exc:
            problems.append(CellViolation(f.name, exc.args[0], cell))
    return parsed, problems


def rows_to_table(schema: TableSchema, rows: Sequence[Mapping]) -> DataTable:
    return DataTable.from_columns(schema, {f.name: [r.get(f.name) for r in rows] for f in schema})


def read_table(text: str, schema: TableSchema, source: str = "<string>") -> DataTable:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise TableError(f"{source}: empty file, header row required") from None
    expected = set(schema.names)
    if len(set(header)) != len(header):
        raise TableError(f"{source}: duplicate header names")
    if set(header) != expected:
        missing = sorted(expected - set(header))
        extra = sorted(set(header) - expected)
        raise TableError(f"{source}: header mismatch (missing {missing}, unexpected {extra})")
    specs = [schema[h] for h in header]
    values: dict[str, list] = {h: [] for h in header}
    for rowno, cells in enumerate(reader, start=1):
        if not cells:
            continue
        if len(cells) != len(header):
            raise TableError(f"{source}: expected {len(header)} cells, got {len(cells)}", row=rowno)
        for spec, cell in zip(specs, cells):
            try:
                values[spec.name].append(spec.parse(cell))
            except ValueError as exc:
                reason = exc.args[0]
                raise TableError(f"{source}: cannot accept {cell!r} ({reason})", row=rowno,
                                 column=spec.name) from None
    return DataTable.from_columns(schema, values)


def load_table(path: str | os.PathLike, schema: TableSchema) -> DataTable:
    """Read a CSV whose header names match the schema (in any order)."""
    path = Path(path)
    return read_table(path.read_text(encoding="utf-8"), schema, source=path.name)


def format_table(table: DataTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    names = table.schema.names
    writer.writerow(names)
    cols = [table.columns[n] for n in names]
    for i in range(table.n_rows):
        writer.writerow([format_value(c[i]) for c in cols])
    return buf.getvalue()


def write_table(path: str | os.PathLike, table: DataTable) -> None:
    Path(path).write_text(format_table(table), encoding="utf-8")


# ---------------------------------------------------------------------------
# summaries, splits, projections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSummary:
    n_rows: int
    n_features: int
    positive_label_rate: float
    per_group_counts: dict[str, dict[str, int]]
    missing_total: int


def label_vector(table: DataTable) -> np.ndarray:
    """1.0 for the positive class, 0.0 for the other, nan when missing."""
    spec = table.schema.label
    col = table.columns[spec.name]
    if spec.kind == "continuous":
        raise TableError("label must be binary or categorical", column=spec.name)
    positive = spec.allowed_values[-1]
    out = (col == positive).astype(float)
    out[col == ""] = np.nan
    return out


def summarize(table: DataTable) -> DatasetSummary:
    y = label_vector(table)
    observed = y[~np.isnan(y)]
    rate = float(observed.mean()) if observed.size else 0.0
    groups = {}
    for g in table.schema.groups:
        col = table.columns[g.name]
        counts = Counter(v for v in col if v != "")
        groups[g.name] = {v: counts[v] for v in g.allowed_values if counts[v]}
    return DatasetSummary(
        n_rows=table.n_rows,
        n_features=len(table.schema),
        positive_label_rate=rate,
        per_group_counts=groups,
        missing_total=int(table.missing_mask.sum()),
    )


@dataclass(frozen=True)
class Split:
    train: DataTable
    test: DataTable
    stratified: bool

    def __iter__(self):
        return iter((self.train, self.test))


def _allocate(sizes: list[int], total: int) -> list[int]:
    """Largest-remainder apportionment of ``total`` across strata."""
    n = sum(sizes)
    exact = [s * total / n for s in sizes]
    base = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


def split(table: DataTable, fraction: float, seed: int) -> Split:
    """Partition rows into (first, second) with ``fraction`` of rows in the first part.

    Stratifies on the label; when either class is too small to land in both
    parts the split falls back to a plain shuffle and ``stratified`` is False.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    n = table.n_rows
    n_first = int(round(fraction * n))
    rng = np.random.default_rng(seed)
    y = label_vector(table)
    strata = [np.flatnonzero(y == 0), np.flatnonzero(y == 1)]
    unlabeled = np.flatnonzero(np.isnan(y))
    feasible = (
        all(len(s) >= 2 for s in strata)
        and 0 < n_first < n
    )
    if feasible:
        groups = strata + ([unlabeled] if unlabeled.size else [])
        alloc = _allocate([len(s) for s in groups], n_first)
        feasible = all(0 < a < len(s) for a, s in zip(alloc[:2], strata))
    if feasible:
        first = np.concatenate([rng.permutation(s)[:a] for s, a in zip(groups, alloc)])
    else:
        warnings.warn("too few rows per class to stratify; using an unstratified split", stacklevel=2)
        first = rng.permutation(n)[:n_first]
    in_first = np.zeros(n, dtype=bool)
    in_first[first] = True
    return Split(table.take(np.flatnonzero(in_first)), table.take(np.flatnonzero(~in_first)), feasible)


def select_features(table: DataTable, names: Sequence[str]) -> DataTable:
    """Project onto ``names`` (in that order) with the label appended last."""
    schema = table.schema
    unknown = [n for n in names if n not in schema]
    if unknown:
        raise KeyError(f"unknown feature names: {unknown}")
    label = schema.label.name
    order = [n for n in dict.fromkeys(names) if n != label] + [label]
    sub = schema.subset(order)
    idx = [schema.index[n] for n in order]
    return DataTable(sub, {n: table.columns[n] for n in order}, _freeze(table.missing_mask[:, idx].copy()))


def fill_values(table: DataTable, policy: str = "median") -> dict[str, float | str]:
    """Per-feature fill values: median (or mean) for continuous, mode for the rest."""
    out: dict[str, float | str] = {}
    for f in table.schema:
        col = table.columns[f.name]
        if f.is_continuous:
            obs = col[~np.isnan(col)]
            if not obs.size:
                out[f.name] = f.range[0] if f.range else 0.0
            elif policy == "median":
                out[f.name] = float(np.median(obs))
            elif policy == "mean":
                out[f.name] = float(np.mean(obs))
            else:
                raise ValueError(f"unknown imputation policy {policy!r}")
        else:
            counts = Counter(v for v in col if v != "")
            # ties go to the earlier allowed value
            out[f.name] = max(f.allowed_values, key=lambda v: (counts[v], -f.allowed_values.index(v)))
    return out


def impute(table: DataTable, values: Mapping[str, float | str]) -> DataTable:
    cols = {}
    for f in table.schema:
        col = table.columns[f.name]
        miss = table.missing(f.name)
        if miss.any() and f.name in values:
            col = col.copy()
            col[miss] = values[f.name]
        cols[f.name] = col
    return DataTable.from_columns(table.schema, cols)


def encode(table: DataTable, names: Sequence[str]) -> np.ndarray:
    """Numeric design matrix; categories become their allowed-value index, missing -> nan."""
    X = np.empty((table.n_rows, len(names)))
    for j, name in enumerate(names):
        spec = table.schema[name]
        col = table.columns[name]
        if spec.is_continuous:
            X[:, j] = col
        else:
            lookup = {v: float(i) for i, v in enumerate(spec.allowed_values)}
            X[:, j] = [lookup.get(v, np.nan) for v in col]
    return X
