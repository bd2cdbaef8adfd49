"""Offline stand-in for a chat-completion endpoint.

It reads the row count, header and group clause from the prompt and answers
with a fenced CSV block. Exactly ``bad_rate`` of the rows (rounded down) carry an out-of-range value
so validation has something to reject.
"""

import csv
import io
import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import httpx
import numpy as np


class MockModel:
    def __init__(self, schema, bad_rate=0.1, seed=0, script=()):
        self.schema = schema
        self.bad_rate = bad_rate
        self.seed = seed
        self.script = list(script)  # status codes returned before normal service
        self.calls = 0
        self._lock = threading.Lock()

    def _value(self, spec, rng, bad):
        if spec.is_continuous:
            lo, hi = spec.range if spec.range is not None else (-3.0, 3.0)
            if bad:
                return repr(hi + 100.0)
            return repr(round(float(rng.uniform(lo, hi)), 2))
        return spec.allowed_values[int(rng.integers(len(spec.allowed_values)))]

    def completion(self, body: dict) -> tuple[int, dict]:
        with self._lock:
            self.calls += 1
            if self.script:
                return self.script.pop(0), {"error": "scripted"}
        prompt = body["messages"][-1]["content"]
        n = int(re.search(r"Write (\d+)", prompt).group(1))
        header = re.search(r"this header:\n(.*)\n", prompt).group(1).split(",")
        group = re.search(r"belongs to the group (\S+) = (.+?)\. ", prompt)
        prior = re.search(r"Columns already filled in: .*\n\n```csv\n(.*?)```", prompt, re.S)
        prior_rows = list(csv.DictReader(io.StringIO(prior.group(1)))) if prior else [{}] * n
        rng = np.random.default_rng([self.seed, body.get("seed", 0)])
        # out-of-range values go into a ranged column this turn writes
        ranged = [c for c in header if self.schema[c].range is not None and not any(c in r for r in prior_rows)]
        lines = [",".join(header)]
        for i, old in enumerate(prior_rows):
            # exactly floor(n * bad_rate) malformed rows per response
            bad = ranged and int((i + 1) * self.bad_rate) > int(i * self.bad_rate)
            row = dict(old)
            for c in header:
                if c not in row:
                    row[c] = self._value(self.schema[c], rng, bool(bad) and c == ranged[0])
            if group:
                row[group.group(1)] = group.group(2)
            lines.append(",".join(row[c] for c in header))
        text = "Here are the records.\n\n```csv\n" + "\n".join(lines) + "\n```\nLet me know if you need more."
        return 200, {"choices": [{"message": {"role": "assistant", "content": text}}],
                     "usage": {"prompt_tokens": len(prompt) // 4, "completion_tokens": len(text) // 4}}

    def transport(self) -> httpx.MockTransport:
        def handler(request: httpx.Request) -> httpx.Response:
            status, payload = self.completion(json.loads(request.content))
            return httpx.Response(status, json=payload)
        return httpx.MockTransport(handler)


class MockServer:
    """Serves a MockModel on a local TCP port for the duration of a ``with`` block."""

    def __init__(self, model: MockModel):
        self.model = model

        class Handler(BaseHTTPRequestHandler):
            def do_POST(h):
                body = json.loads(h.rfile.read(int(h.headers["Content-Length"])))
                status, payload = model.completion(body)
                data = json.dumps(payload).encode()
                h.send_response(status)
                h.send_header("Content-Type", "application/json")
                h.send_header("Content-Length", str(len(data)))
                h.end_headers()
                h.wfile.write(data)

            def log_message(h, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.httpd.server_address[1]}/v1"

    def __enter__(self):
        threading.Thread(target=self.httpd.serve_forever, daemon=True).start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()
