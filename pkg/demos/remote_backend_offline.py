"""
Remote backend against a stand-in endpoint
==========================================

The remote backend talks to any OpenAI-compatible chat-completion API. Here
an in-process transport plays the server: it answers every prompt with a
CSV block in which some rows are out of range. The generator re-prompts for
the shortfall, and the second run is served from the disk cache.
"""

import json
import os
import re
import tempfile

import httpx
import numpy as np

from synthehr import (GenerationRequest, GenerationStrategy, LLMClient, RemoteBackend, generate, select_features,
                      simulate_cohort)

seed = select_features(simulate_cohort(300, seed=2), ["is_female", "age", "gcs_min", "heartrate_max", "death"])
os.environ.setdefault("SYNTHEHR_API_KEY", "not-a-real-key")


def fake_server(request):
    body = json.loads(request.content)
    prompt = body["messages"][-1]["content"]
    n = int(re.search(r"Write (\d+)", prompt).group(1))
    rng = np.random.default_rng(body["seed"])
    lines = ["is_female,age,gcs_min,heartrate_max,death"]
    for i in range(n):
        age = 240 if i % 8 == 7 else int(rng.integers(20, 90))  # every eighth row is invalid
        lines.append(f"{rng.integers(2)},{age},{rng.integers(3, 16)},{rng.integers(60, 140)},{rng.integers(2)}")
    text = "Here you go:\n```csv\n" + "\n".join(lines) + "\n```"
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


request = GenerationRequest(seed.schema, 120, GenerationStrategy("naive"), seed, 0)
cache = tempfile.mkdtemp()
for attempt in ("cold", "warm"):
    client = LLMClient("http://stand-in/v1", cache_dir=cache, transport=httpx.MockTransport(fake_server))
    table, log = generate(request, RemoteBackend(client, "stand-in-model"))
    print(f"{attempt}: {log.status}, {table.n_rows} rows, {log.n_rejected} rejected {log.rejections_by_feature}, "
          f"{client.network_calls} network calls")

###############################################################################
# The first transcript shows the rendered prompt that was sent.

print(log.transcripts[0]["prompt"][:600])
