"""Live-server round trips with the search package's HTTP clients.

The search CLI talks to the sidecar through the requests library, so these
tests run a real uvicorn server on an ephemeral port rather than an
in-process test client.  The stub backend serves the same vectors as the
package's local synthetic provider, which makes bit-level comparisons
possible across the wire.
"""

import json
import socket
import threading
import time

import numpy as np
import pytest
import requests
import uvicorn

from convsearch.cli import main as convsearch_main
from convsearch.embed import (
    CachedEmbeddingProvider,
    EmbeddingCache,
    EmbeddingDimensionError,
    EmbeddingKey,
    EmbedTransportError,
    SidecarEmbeddingProvider,
    SyntheticEmbeddingProvider,
    embed_batch,
)
from convsearch.rewrite import (
    CTX_TOKEN,
    TURN_TOKEN,
    RewriteTransportError,
    SidecarRewriteProvider,
    rewrite_via_provider,
)
from convsearch_sidecar import StubBackend, create_app

DIM = 24
SEED = 0

CORPUS_LINES = [
    {"id": "V1", "text": "volcano eruptions spew lava and ash"},
    {"id": "V2", "text": "volcano slopes host hardy plants"},
    {"id": "G1", "text": "glacier ice carves deep valleys"},
    {"id": "G2", "text": "glacier melt feeds mountain rivers"},
    {"id": "S1", "text": "star light travels many years"},
    {"id": "N1", "text": "deserts stretch hot and dry"},
]

TOPICS = [
    {
        "topic_id": "101",
        "turns": [
            {"index": 1, "raw": "tell me about volcano eruptions",
             "manual": "volcano eruptions"},
            {"index": 2, "raw": "what about glacier ice", "manual": "glacier ice"},
        ],
    },
    {
        "topic_id": "102",
        "turns": [
            {"index": 1, "raw": "star light", "manual": "star light"},
            {"index": 2, "raw": "glacier melt", "manual": "glacier melt"},
        ],
    },
]

QRELS_LINES = [
    "101_1 Q0 V1 2",
    "101_1 Q0 V2 1",
    "101_1 Q0 G1 0",
    "101_2 Q0 G1 2",
    "101_2 Q0 V1 0",
    "102_1 Q0 S1 2",
    "102_1 Q0 N1 0",
    "102_2 Q0 G2 1",
    "102_2 Q0 S1 0",
]


@pytest.fixture(scope="module")
def server_url():
    backend = StubBackend(dim=DIM, max_seq=256, seed=SEED)
    app = create_app(backend, max_batch=64)
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    server = uvicorn.Server(
        uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error")
    )
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{port}"
    deadline = time.time() + 15.0
    while True:
        try:
            if requests.get(f"{url}/health", timeout=1.0).status_code == 200:
                break
        except requests.RequestException:
            pass
        if time.time() > deadline:
            raise RuntimeError("sidecar server did not come up")
        time.sleep(0.05)
    yield url
    server.should_exit = True
    thread.join(timeout=5.0)


class TestEmbeddingClient:
    def test_probe_discovers_dimension(self, server_url):
        provider = SidecarEmbeddingProvider(server_url)
        assert provider.dim == DIM

    def test_bitwise_parity_with_local_synthetic(self, server_url):
        remote = SidecarEmbeddingProvider(server_url)
        local = SyntheticEmbeddingProvider(dim=DIM, seed=SEED)
        keys = [
            EmbeddingKey("what is a glacier", "a glacier is persistent ice"),
            EmbeddingKey("", "passage with empty query"),
            EmbeddingKey("how can you become one",
                         "physician’s assistants train for years"),
        ]
        for key in keys:
            over_wire = remote.embed_pair(key)
            in_process = local.embed_pair(key)
            assert over_wire.dtype == np.float32
            assert np.array_equal(over_wire, in_process)

    def test_batch_equals_singletons_across_posts(self, server_url):
        # 20 keys with client batch_size 8 forces three separate posts
        provider = SidecarEmbeddingProvider(server_url, batch_size=8)
        keys = [EmbeddingKey(f"query {i}", f"passage {i}") for i in range(20)]
        batched = embed_batch(keys, provider)
        singles = [
            SidecarEmbeddingProvider(server_url).embed_pair(k) for k in keys
        ]
        assert len(batched) == 20
        for got, want in zip(batched, singles):
            assert np.array_equal(got, want)

    def test_dimension_mismatch_raises(self, server_url):
        provider = SidecarEmbeddingProvider(server_url, expected_dim=DIM + 1)
        with pytest.raises(EmbeddingDimensionError):
            provider.embed_pair(EmbeddingKey("q", "p"))

    def test_unreachable_service_raises_transport_error(self):
        with pytest.raises(EmbedTransportError):
            SidecarEmbeddingProvider("http://127.0.0.1:9", timeout=0.2)
        provider = SidecarEmbeddingProvider(
            "http://127.0.0.1:9", expected_dim=8, timeout=0.2
        )
        with pytest.raises(EmbedTransportError):
            provider.embed_pair(EmbeddingKey("q", "p"))

    def test_disk_cache_short_circuits_second_fetch(self, server_url, tmp_path):
        inner = SidecarEmbeddingProvider(server_url)
        cached = CachedEmbeddingProvider(
            inner, EmbeddingCache(tmp_path / "pairs.cache")
        )
        key = EmbeddingKey("cached query", "cached passage")
        first = cached.embed_pair(key)
        assert inner.calls == 1
        second = cached.embed_pair(key)
        assert inner.calls == 1, "second lookup must come from the cache"
        assert np.array_equal(first, second)


class TestRewriteClient:
    def test_echo_round_trip(self, server_url):
        provider = SidecarRewriteProvider(server_url)
        text = (
            f"what about the cost {CTX_TOKEN} tell me about glaciers "
            f"ice carves valleys {TURN_TOKEN} how do they move"
        )
        assert provider.rewrite(text) == "what about the cost"

    def test_via_provider_happy_path(self, server_url):
        text = f"and the salary {CTX_TOKEN} what is a nurse"
        assert (
            rewrite_via_provider(text, SidecarRewriteProvider(server_url))
            == "and the salary"
        )

    def test_blank_current_maps_to_transport_error(self, server_url):
        # the service refuses an empty current query with a non-200
        provider = SidecarRewriteProvider(server_url)
        with pytest.raises(RewriteTransportError, match="422"):
            provider.rewrite(f"   {CTX_TOKEN} some history")

    def test_unreachable_service(self):
        provider = SidecarRewriteProvider("http://127.0.0.1:9", timeout=0.2)
        with pytest.raises(RewriteTransportError):
            provider.rewrite("anything")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Index and trained head shared by the CLI round-trip tests."""
    root = tmp_path_factory.mktemp("live")
    corpus = root / "corpus.jsonl"
    corpus.write_text(
        "".join(json.dumps(line) + "\n" for line in CORPUS_LINES),
        encoding="utf-8",
    )
    (root / "topics.json").write_text(json.dumps(TOPICS), encoding="utf-8")
    (root / "qrels.txt").write_text(
        "".join(line + "\n" for line in QRELS_LINES), encoding="utf-8"
    )
    index_dir = root / "index"
    assert convsearch_main(
        ["index", "--corpus", str(corpus), "--out", str(index_dir)]
    ) == 0
    model = root / "head.json"
    assert convsearch_main(
        ["train", "--topics", str(root / "topics.json"),
         "--qrels", str(root / "qrels.txt"), "--scale", "zero_two",
         "--index", str(index_dir), "--head", "linear",
         "--out", str(model), "--epochs", "3", "--hidden", "4",
         "--embed-dim", str(DIM), "--seed", "7"]
    ) == 0
    return {"root": root, "index": index_dir, "model": model,
            "topics": root / "topics.json"}


class TestCliAgainstLiveServer:
    def test_sidecar_run_matches_local_synthetic_run(self, workspace, server_url):
        # same vectors over the wire must give a byte-identical run file
        base = ["run", "--topics", str(workspace["topics"]),
                "--index", str(workspace["index"]), "--method", "manual",
                "--head-model", str(workspace["model"]),
                "--embed-dim", str(DIM), "--embed-seed", str(SEED)]
        local_dir = workspace["root"] / "out_local"
        assert convsearch_main(
            base + ["--embedder", "synthetic", "--out-dir", str(local_dir)]
        ) == 0
        wire_dir = workspace["root"] / "out_wire"
        assert convsearch_main(
            base + ["--embedder", "sidecar", "--sidecar-url", server_url,
                    "--out-dir", str(wire_dir)]
        ) == 0
        local_run = (local_dir / "run.txt").read_bytes()
        wire_run = (wire_dir / "run.txt").read_bytes()
        assert local_run == wire_run

    def test_sidecar_rewriter_echo_matches_local_echo(self, workspace, server_url):
        base = ["run", "--topics", str(workspace["topics"]),
                "--index", str(workspace["index"]), "--method", "t5"]
        local_dir = workspace["root"] / "rw_local"
        assert convsearch_main(
            base + ["--rewriter", "echo", "--out-dir", str(local_dir)]
        ) == 0
        wire_dir = workspace["root"] / "rw_wire"
        assert convsearch_main(
            base + ["--rewriter", "sidecar", "--sidecar-url", server_url,
                    "--out-dir", str(wire_dir)]
        ) == 0
        assert (local_dir / "run.txt").read_bytes() == (
            wire_dir / "run.txt"
        ).read_bytes()
