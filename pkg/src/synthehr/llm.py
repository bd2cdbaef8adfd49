"""Remote text-generation backend: prompt templates, an HTTP client with a disk
cache and retries, and CSV extraction from free-form responses.

Remote output is treated as untrusted. Every row is re-validated against the
schema, and anything that fails is returned as a reject with reasons.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import re
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from string import Formatter
from typing import Callable, Mapping, Sequence

import httpx
import numpy as np

from .generators import GenerationRequest, Proposal, RowReject
from .schema import CellViolation, DataTable, FeatureSpec, TableSchema, concat, empty_table, format_table, \
    format_value, parse_row, rows_to_table

API_KEY_ENV = "SYNTHEHR_API_KEY"
MAX_EXEMPLARS = 50
HEADER_MATCH = 0.8
TRANSIENT = {429, 500, 502, 503, 504}


class PromptError(ValueError):
    pass


class ConfigurationError(RuntimeError):
    pass


class LLMError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# prompts
# ---------------------------------------------------------------------------

_REQUIRED = {
    "naive": {"schema_block", "exemplar_rows"},
    "schema_constrained": {"schema_block", "exemplar_rows", "constraints"},
    "conditional": {"schema_block", "exemplar_rows", "prior_features"},
    "group_based": {"schema_block", "exemplar_rows", "group_value"},
}

_OUTPUT = ("Return the records in a structured format such as CSV: one header line, then one line per "
           "record, inside a single ```csv fenced block. Use exactly this header:\n{header}\n"
           "Leave a cell empty when a value is unknown.")

_INTRO = "You write synthetic patient records for method development. No real patient may be reproduced."

NAIVE_BODY = f"""{_INTRO}

The table has these columns:
{{schema_block}}

Example rows from the source table:
{{exemplar_rows}}

Write {{n_rows}} new records that look like they come from the same table.

{_OUTPUT}"""

SCHEMA_BODY = f"""{_INTRO}

The table has these columns:
{{schema_block}}

Example rows from the source table:
{{exemplar_rows}}

Write {{n_rows}} new records. Every record must satisfy these column constraints:
{{constraints}}

{_OUTPUT}"""

CONDITIONAL_BODY = f"""{_INTRO}

The table has these columns:
{{schema_block}}

Example rows from the source table:
{{exemplar_rows}}

Records are built a few columns at a time. Columns already filled in: {{prior_features}}
{{prior_rows}}
Add the columns {{target_features}} to every record, choosing each new value given the values \
already present in the same record. Keep the existing values and the record order unchanged.
Write {{n_rows}} records.

{_OUTPUT}"""

GROUP_BODY = f"""{_INTRO}

The table has these columns:
{{schema_block}}

Example rows from the source table, all from the same group:
{{exemplar_rows}}

Every record you write belongs to the group {{group_feature}} = {{group_value}}. Generate the other \
columns conditioned on that group, so that group-specific patterns are kept.
Write {{n_rows}} records.

{_OUTPUT}"""


@dataclass(frozen=True)
class PromptTemplate:
    strategy: str
    body: str

    def __post_init__(self):
        if self.strategy not in _REQUIRED:
            raise PromptError(f"unknown strategy {self.strategy!r}")
        missing = _REQUIRED[self.strategy] - self.placeholders
        if missing:
            raise PromptError(f"{self.strategy} template lacks placeholders {sorted(missing)}")

    @property
    def placeholders(self) -> set[str]:
        return {f for _, f, _, _ in Formatter().parse(self.body) if f}


DEFAULT_TEMPLATES = {
    "naive": PromptTemplate("naive", NAIVE_BODY),
    "schema_constrained": PromptTemplate("schema_constrained", SCHEMA_BODY),
    "conditional": PromptTemplate("conditional", CONDITIONAL_BODY),
    "group_based": PromptTemplate("group_based", GROUP_BODY),
}


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def schema_block(schema: TableSchema) -> str:
    lines = []
    for f in schema:
        parts = [f.kind]
        if f.role != "covariate":
            parts.append(f.role)
        if f.range is not None:
            parts.append(f"range {_fmt_num(f.range[0])} to {_fmt_num(f.range[1])}")
        if f.allowed_values:
            parts.append("values " + "|".join(f.allowed_values))
        if f.unit:
            parts.append(f"unit {f.unit}")
        lines.append(f"- {f.name} ({', '.join(parts)})")
    return "\n".join(lines)


def constraint_block(schema: TableSchema) -> str:
    lines = []
    for f in schema:
        if f.range is not None:
            lines.append(f"- {f.name} is a number between {_fmt_num(f.range[0])} and {_fmt_num(f.range[1])}")
        elif f.is_continuous:
            lines.append(f"- {f.name} is a number")
        else:
            lines.append(f"- {f.name} is one of: {', '.join(f.allowed_values)}")
    return "\n".join(lines)


def exemplar_block(rows: DataTable, max_rows: int = MAX_EXEMPLARS) -> str:
    return format_table(rows.take(np.arange(min(rows.n_rows, max_rows)))).rstrip("\n")


def render_prompt(template: PromptTemplate, request: GenerationRequest, context: Mapping | None = None,
                  n_rows: int | None = None, max_exemplars: int = MAX_EXEMPLARS) -> str:
    """Fill ``template`` from the request and optional turn context.

    Context keys: ``group_value``; for conditional turns ``prior_features``
    (a possibly empty list), ``prior_rows`` (CSV text) and ``target_features``.
    """
    ctx = dict(context or {})
    schema = request.schema
    seed = request.seed_sample
    values = {"schema_block": schema_block(schema), "constraints": constraint_block(schema),
              "n_rows": n_rows if n_rows is not None else request.n_samples,
              "group_feature": request.strategy.group_feature or ""}
    header = list(schema.names)
    if "prior_features" in template.placeholders:
        if "prior_features" not in ctx:
            raise PromptError("conditional prompt needs prior_features context")
        prior = list(ctx["prior_features"])
        target = list(ctx.get("target_features", [n for n in schema.names if n not in prior]))
        values["prior_features"] = ", ".join(prior) if prior else "none yet; start new records"
        values["prior_rows"] = ("\n```csv\n" + ctx["prior_rows"].rstrip("\n") + "\n```\n") \
            if ctx.get("prior_rows") else ""
        values["target_features"] = ", ".join(target)
        header = prior + target
    if "group_value" in template.placeholders:
        g = ctx.get("group_value")
        if g is None:
            raise PromptError("group prompt needs a group_value")
        gf = request.strategy.group_feature
        if gf is not None:
            seed = seed.take(np.flatnonzero(seed.columns[gf] == g))
        values["group_value"] = g
    values["exemplar_rows"] = "```csv\n" + exemplar_block(seed, max_exemplars) + "\n```"
    values["header"] = ",".join(header)
    try:
        return template.body.format(**values)
    except KeyError as exc:
        raise PromptError(f"no value for placeholder {exc.args[0]!r}") from None


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------

_FENCE = re.compile(r"```[ \t]*([A-Za-z0-9_-]*)[ \t]*\n(.*?)```", re.S)


@dataclass
class Extraction:
    rows: DataTable
    rejects: list[RowReject]
    n_parsed: int
    reason: str | None = None


def _norm(name: str) -> str:
    return name.strip().strip('"').strip().lower()


def _blocks(text: str) -> list[tuple[int, str]]:
    out = []
    covered = []
    for m in _FENCE.finditer(text):
        out.append((m.start(), m.group(2)))
        covered.append((m.start(), m.end()))
    pos = 0
    run: list[str] = []
    start = 0
    for line in text.splitlines(keepends=True):
        inside = any(a <= pos < b for a, b in covered)
        if not inside and "," in line and line.strip():
            if not run:
                start = pos
            run.append(line)
        else:
            if run:
                out.append((start, "".join(run)))
            run = []
        pos += len(line)
    if run:
        out.append((start, "".join(run)))
    return sorted(out, key=lambda t: t[0])


def header_map(header: Sequence[str], names: Sequence[str]) -> dict[int, str]:
    """Header position -> column name for cells whose name matches (case-insensitive)."""
    lookup = {_norm(n): n for n in names}
    return {i: lookup[_norm(h)] for i, h in enumerate(header) if _norm(h) in lookup}


def _extract(text: str, specs: Sequence[FeatureSpec], min_match: float):
    names = [f.name for f in specs]
    for _, block in _blocks(text):
        lines = list(csv.reader(io.StringIO(block.strip("\n"))))
        if not lines:
            continue
        mapping = header_map(lines[0], names)
        if len(set(mapping.values())) < min_match * len(names):
            continue
        good, rejects, n = [], [], 0
        for cells in lines[1:]:
            if not cells or all(not c.strip() for c in cells):
                continue
            n += 1
            raw = ",".join(cells)
            if len(cells) != len(lines[0]):
                rejects.append(RowReject((CellViolation(None, "row_length",
                                                        f"{len(cells)} cells, header has {len(lines[0])}"),),
                                         raw))
                continue
            record = {name: cells[i] for i, name in mapping.items()}
            parsed, problems = parse_row(specs, record)
            if problems:
                rejects.append(RowReject(tuple(problems), raw))
            else:
                good.append(parsed)
        return good, rejects, n, None
    return [], [], 0, "no CSV block"


def extract_rows(text: str, schema: TableSchema, min_match: float = HEADER_MATCH) -> Extraction:
    """Parse the first CSV block whose header names at least ``min_match`` of the schema columns.

    Schema columns absent from the header become missing cells; extra
    columns are ignored.
    """
    good, rejects, n, reason = _extract(text, list(schema), min_match)
    table = rows_to_table(schema, good) if good else empty_table(schema)
    return Extraction(table, rejects, n, reason)


def _records_csv(names: Sequence[str], records: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in records:
        w.writerow([format_value(r[n]) for n in names])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# HTTP client
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CompletionRequest:
    model: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.7
    max_tokens: int = 4096
    seed: int | None = None

    @classmethod
    def from_prompt(cls, model: str, prompt: str, **kw) -> "CompletionRequest":
        return cls(model, (("user", prompt),), **kw)

    @property
    def prompt(self) -> str:
        return self.messages[-1][1]

    def payload(self) -> dict:
        d = {"model": self.model, "messages": [{"role": r, "content": c} for r, c in self.messages],
             "temperature": self.temperature, "max_tokens": self.max_tokens}
        if self.seed is not None:
            d["seed"] = self.seed
        return d


@dataclass
class CompletionResponse:
    text: str
    status: int
    usage: dict = field(default_factory=dict)
    latency_s: float = 0.0
    attempts: list[dict] = field(default_factory=list)
    cached: bool = False
    key: str = ""

    def to_dict(self) -> dict:
        return {"text": self.text, "status": self.status, "usage": self.usage, "latency_s": self.latency_s,
                "attempts": self.attempts}


class LLMClient:
    """Chat-completion client for an OpenAI-compatible ``/chat/completions`` endpoint.

    Responses are cached on disk under a hash of (endpoint, request), so a
    warm cache serves repeated requests without any network traffic and
    without needing a credential. Transient failures (429, 5xx, transport
    errors) are retried with exponential backoff.
    """

    def __init__(self, endpoint: str, cache_dir: str | os.PathLike | None = None,
                 api_key_env: str = API_KEY_ENV, max_retries: int = 4, backoff_s: float = 0.5,
                 max_in_flight: int = 4, timeout_s: float = 120.0,
                 transport: httpx.BaseTransport | None = None, sleep: Callable[[float], None] = time.sleep,
                 transcript_path: str | os.PathLike | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.url = self.endpoint if self.endpoint.endswith("/chat/completions") \
            else self.endpoint + "/chat/completions"
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.max_in_flight = max_in_flight
        self.timeout_s = timeout_s
        self.transport = transport
        self.sleep = sleep
        self.transcript_path = Path(transcript_path) if transcript_path else None
        self.network_calls = 0
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def key(self, request: CompletionRequest) -> str:
        blob = json.dumps({"url": self.url, "request": request.payload()}, sort_keys=True,
                          separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def _cache_path(self, key: str) -> Path | None:
        return self.cache_dir / key[:2] / f"{key}.json" if self.cache_dir is not None else None

    def call(self, request: CompletionRequest) -> CompletionResponse:
        key = self.key(request)
        path = self._cache_path(key)
        with self._lock(key):
            if path is not None and path.exists():
                d = json.loads(path.read_text(encoding="utf-8"))
                return CompletionResponse(d["text"], d["status"], d.get("usage", {}), d.get("latency_s", 0.0),
                                          d.get("attempts", []), cached=True, key=key)
            token = os.environ.get(self.api_key_env)
            if not token:
                raise ConfigurationError(f"credential missing: set the {self.api_key_env} environment variable")
            response = self._post(request, token)
            response.key = key
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    json.dump(response.to_dict(), fh)
                os.replace(tmp, path)
            self._transcribe(key, request, response)
            return response

    def _post(self, request: CompletionRequest, token: str) -> CompletionResponse:
        attempts: list[dict] = []
        headers = {"Authorization": f"Bearer {token}", "Content-Type": "application/json"}
        t_start = time.perf_counter()
        with httpx.Client(transport=self.transport, timeout=self.timeout_s) as http:
            for attempt in range(self.max_retries + 1):
                t0 = time.perf_counter()
                status, error = None, ""
                with self._slots:
                    with self._guard:
                        self.network_calls += 1
                    try:
                        r = http.post(self.url, json=request.payload(), headers=headers)
                        status = r.status_code
                    except httpx.TransportError as exc:
                        error = f"{type(exc).__name__}: {exc}"
                attempts.append({"attempt": attempt, "status": status, "error": error,
                                 "latency_s": round(time.perf_counter() - t0, 6)})
                if status == 200:
                    try:
                        body = r.json()
                        text = body["choices"][0]["message"]["content"] or ""
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise LLMError(f"malformed completion body: {exc}") from None
                    return CompletionResponse(text, 200, body.get("usage", {}) or {},
                                              time.perf_counter() - t_start, attempts)
                if status is not None and status not in TRANSIENT:
                    raise LLMError(f"HTTP {status} from {self.url}: {r.text[:200]}")
                if attempt < self.max_retries:
                    self.sleep(self.backoff_s * 2 ** attempt)
        raise LLMError(f"retry budget exhausted after {len(attempts)} attempts: {attempts[-1]}")

    def _transcribe(self, key: str, request: CompletionRequest, response: CompletionResponse) -> None:
        if self.transcript_path is None:
            return
        self.transcript_path.parent.mkdir(parents=True, exist_ok=True)
        line = json.dumps({"key": key, "request": request.payload(), "response": response.to_dict()})
        with self._guard, open(self.transcript_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# backend
# ---------------------------------------------------------------------------


class RemoteBackend:
    """GeneratorBackend that prompts a remote model.

    naive / schema_constrained: one prompt per batch of rows.
    group_based: batches per group; rows whose group cell disagrees with the
    prompt's group are rejected.
    conditional: a multi-turn exchange per batch, adding ``block_size``
    columns per turn in schema order; each turn's rows are validated on the
    columns present so far.
    """

    name = "remote"

    def __init__(self, client: LLMClient, model: str, temperature: float = 0.7, max_tokens: int = 4096,
                 batch_size: int = 50, block_size: int = 5, max_exemplars: int = MAX_EXEMPLARS,
                 templates: Mapping[str, PromptTemplate] | None = None):
        if batch_size < 1 or block_size < 1:
            raise ValueError("batch_size and block_size must be positive")
        self.client = client
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.batch_size = batch_size
        self.block_size = block_size
        self.max_exemplars = max_exemplars
        self.templates = dict(DEFAULT_TEMPLATES if templates is None else templates)

    def _request(self, messages, nonce: tuple) -> CompletionRequest:
        seed = int.from_bytes(hashlib.sha256(repr(nonce).encode()).digest()[:4], "big")
        return CompletionRequest(self.model, tuple(messages), self.temperature, self.max_tokens, seed)

    def _jobs(self, request: GenerationRequest, quota: dict, attempt: int) -> list[tuple]:
        jobs = []
        for gi, (g, n) in enumerate(quota.items()):
            for c, start in enumerate(range(0, n, self.batch_size)):
                jobs.append((g, min(self.batch_size, n - start), (request.rng_seed, attempt, gi, c)))
        return jobs

    def propose(self, request: GenerationRequest, quota: dict, attempt: int) -> Proposal:
        jobs = self._jobs(request, quota, attempt)
        run = self._conditional if request.strategy.variant == "conditional" else self._single
        with ThreadPoolExecutor(max_workers=max(1, self.client.max_in_flight)) as pool:
            results = list(pool.map(lambda j: run(request, *j), jobs))
        tables = [r.rows for r in results if r.rows.n_rows]
        return Proposal(concat(tables) if tables else empty_table(request.schema),
                        [x for r in results for x in r.rejects], [t for r in results for t in r.transcripts])

    def _single(self, request: GenerationRequest, group, n: int, nonce: tuple) -> Proposal:
        variant = request.strategy.variant
        ctx = {"group_value": group} if variant == "group_based" else None
        prompt = render_prompt(self.templates[variant], request, ctx, n, self.max_exemplars)
        resp = self.client.call(self._request([("user", prompt)], nonce))
        ext = extract_rows(resp.text, request.schema)
        rows, rejects = ext.rows, list(ext.rejects)
        if variant == "group_based" and rows.n_rows:
            gf = request.strategy.group_feature
            ok = rows.columns[gf] == group
            for i in np.flatnonzero(~ok):
                rejects.append(RowReject((CellViolation(gf, "group_mismatch",
                                                        f"expected {group!r}, got {rows.columns[gf][i]!r}"),)))
            rows = rows.take(np.flatnonzero(ok))
        return Proposal(rows, rejects, [_transcript(prompt, resp, ext.n_parsed, rows.n_rows, len(rejects),
                                                    ext.reason, group)])

    def _conditional(self, request: GenerationRequest, group, n: int, nonce: tuple) -> Proposal:
        schema = request.schema
        names = schema.names
        blocks = [names[i:i + self.block_size] for i in range(0, len(names), self.block_size)]
        messages: list[tuple[str, str]] = []
        prior: list[str] = []
        prior_rows = ""
        rejects: list[RowReject] = []
        transcripts = []
        records: list[dict] = []
        for turn, block in enumerate(blocks):
            ctx = {"prior_features": prior, "prior_rows": prior_rows, "target_features": block}
            prompt = render_prompt(self.templates["conditional"], request, ctx, n, self.max_exemplars)
            messages.append(("user", prompt))
            resp = self.client.call(self._request(messages, nonce + (turn,)))
            messages.append(("assistant", resp.text))
            cols = prior + block
            records, bad, parsed, reason = _extract(resp.text, [schema[c] for c in cols], HEADER_MATCH)
            rejects.extend(bad)
            transcripts.append(_transcript(prompt, resp, parsed, len(records), len(bad), reason, group, turn))
            if not records:
                break
            prior = cols
            prior_rows = _records_csv(cols, records)
        rows = rows_to_table(schema, records) if records else empty_table(schema)
        return Proposal(rows, rejects, transcripts)


def _transcript(prompt: str, resp: CompletionResponse, parsed: int, valid: int, rejected: int,
                reason: str | None, group, turn: int | None = None) -> dict:
    d = {"prompt": prompt, "response": resp.text, "cached": resp.cached, "key": resp.key,
         "attempts": resp.attempts, "parsed": parsed, "valid": valid, "rejected": rejected, "reason": reason}
    if group is not None:
        d["group"] = group
    if turn is not None:
        d["turn"] = turn
    return d
