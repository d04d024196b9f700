from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import httpx
import pytest

from dialogsynth.errors import BackendError, ContractError, PreconditionError, RequestError
from dialogsynth.gateway import (
    BackendConfig,
    ChatRequest,
    HashingEmbedder,
    HttpBackend,
    IdentityEmbedder,
    ScriptedChat,
    make_chat_backend,
    make_embedder,
)

REQ = ChatRequest("sys", "hello", stage="plan", subject="R1")


def chat_ok(content="hi"):
    return httpx.Response(200, json={"choices": [{"message": {"content": content}}]})


def backend(handler, **cfg):
    sleeps = []
    b = HttpBackend(BackendConfig("http://llm.test/v1", token="t0k", model="m", **cfg), httpx.MockTransport(handler), sleeps.append)
    return b, sleeps


def test_chat_payload_and_auth():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return chat_ok("done")

    b, _ = backend(handler)
    assert b.chat(ChatRequest("sys", "u", 0.2, 99, followups=("fb",))) == "done"
    assert seen["url"] == "http://llm.test/v1/chat/completions"
    assert seen["auth"] == "Bearer t0k"
    assert seen["body"]["model"] == "m"
    assert seen["body"]["temperature"] == 0.2 and seen["body"]["max_tokens"] == 99
    assert [m["role"] for m in seen["body"]["messages"]] == ["system", "user", "user"]


@pytest.mark.parametrize("status", [429, 408, 409, 425, 500, 503])
def test_retryable_statuses_then_success(status):
    codes = iter([status, status, 200])

    def handler(request):
        code = next(codes)
        return chat_ok() if code == 200 else httpx.Response(code, text="busy")

    b, sleeps = backend(handler, max_attempts=3, base_backoff=0.5)
    assert b.chat(REQ) == "hi"
    assert b.attempts == 3 and b.retries == 2
    assert sleeps == [0.5, 1.0]


def test_timeouts_are_retried():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) == 1:
            raise httpx.ReadTimeout("slow", request=request)
        return chat_ok()

    b, _ = backend(handler)
    assert b.chat(REQ) == "hi"
    assert len(calls) == 2


def test_gives_up_after_max_attempts():
    b, sleeps = backend(lambda r: httpx.Response(503), max_attempts=4, base_backoff=0.1)
    with pytest.raises(BackendError, match="4 attempt"):
        b.chat(REQ)
    assert b.attempts == 4
    assert sleeps == pytest.approx([0.1, 0.2, 0.4])


def test_client_errors_not_retried():
    b, _ = backend(lambda r: httpx.Response(401, text="bad key"))
    with pytest.raises(RequestError) as ei:
        b.chat(REQ)
    assert ei.value.status_code == 401
    assert b.attempts == 1


def test_unreachable_endpoint():
    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    b, _ = backend(handler, max_attempts=2)
    with pytest.raises(BackendError, match="transport"):
        b.chat(REQ)


def test_malformed_chat_body():
    b, _ = backend(lambda r: httpx.Response(200, json={"choices": []}))
    with pytest.raises(ContractError):
        b.chat(REQ)


def test_max_in_flight_bound():
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def handler(request):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.02)
        with lock:
            state["now"] -= 1
        return chat_ok()

    b, _ = backend(handler, max_in_flight=3)
    with ThreadPoolExecutor(10) as pool:
        assert list(pool.map(lambda _: b.chat(REQ), range(30))) == ["hi"] * 30
    assert 1 < state["peak"] <= 3


def test_embeddings_sorted_by_index_and_batched():
    batches = []

    def handler(request):
        body = json.loads(request.content)
        batches.append(len(body["input"]))
        data = [{"index": i, "embedding": [float(len(t)), 1.0]} for i, t in enumerate(body["input"])]
        return httpx.Response(200, json={"data": list(reversed(data))})

    b = HttpBackend(BackendConfig("http://e.test"), httpx.MockTransport(handler), embed_batch_size=2)
    vecs = b.embed(["a", "bb", "ccc"])
    assert vecs == [[1.0, 1.0], [2.0, 1.0], [3.0, 1.0]]
    assert batches == [2, 1]


@pytest.mark.parametrize(
    "body",
    [{"embeddings": [[1.0], [1.0, 2.0]]}, {"embeddings": [[1.0]]}, {"vectors": []}],
)
def test_embedding_contract_violations(body):
    b = HttpBackend(BackendConfig("http://e.test"), httpx.MockTransport(lambda r: httpx.Response(200, json=body)))
    with pytest.raises(ContractError):
        b.embed(["a", "b"])


def test_request_validation():
    with pytest.raises(PreconditionError):
        ChatRequest("s", "")
    with pytest.raises(PreconditionError):
        BackendConfig("x", max_in_flight=0)


def test_prompt_hash_ignores_routing_hints():
    a = ChatRequest("s", "u", stage="plan", subject="1")
    b = ChatRequest("s", "u", stage="refine", subject="2")
    assert a.prompt_hash() == b.prompt_hash()
    assert a.prompt_hash() != ChatRequest("s", "u2").prompt_hash()


def test_env_overrides_config(monkeypatch):
    monkeypatch.setenv("X_ENDPOINT", "http://env.test")
    monkeypatch.setenv("X_TOKEN", "secret")
    cfg = BackendConfig.from_mapping({"endpoint": "http://file.test", "model": "m"}, "X")
    assert (cfg.endpoint, cfg.token, cfg.model) == ("http://env.test", "secret", "m")
    with pytest.raises(PreconditionError):
        BackendConfig.from_mapping({"endpoint": "x", "colour": "red"})


def test_scripted_chat_routing():
    chat = ScriptedChat({"plan:R1": ["p1", "p2"], "plan": ["generic"], "*": ["fallback"]})
    assert [chat.chat(ChatRequest("", "u", stage="plan", subject="R1")) for _ in range(3)] == ["p1", "p2", "p2"]
    assert chat.chat(ChatRequest("", "u", stage="plan", subject="R2")) == "generic"
    assert chat.chat(ChatRequest("", "u", stage="style")) == "fallback"
    assert chat.count("plan") == 4 and chat.count("plan", "R1") == 3


def test_scripted_chat_list_and_errors():
    chat = ScriptedChat(["a", BackendError("down")])
    assert chat.chat(REQ) == "a"
    with pytest.raises(BackendError):
        chat.chat(REQ)
    with pytest.raises(BackendError, match="exhausted"):
        chat.chat(REQ)


def test_factories(tmp_path):
    p = tmp_path / "script.json"
    p.write_text(json.dumps({"*": ["ok"]}))
    assert make_chat_backend(BackendConfig(f"mock:{p}")).chat(REQ) == "ok"
    assert isinstance(make_embedder(None), HashingEmbedder)
    assert isinstance(make_embedder(BackendConfig("identity:")), IdentityEmbedder)
    assert isinstance(make_embedder(BackendConfig("http://e.test")), HttpBackend)


def test_stub_embedders():
    h = HashingEmbedder()
    a, b, c = h(["nitroglycerin", "nitroglycerine", "oxygen"])
    dot = lambda x, y: sum(p * q for p, q in zip(x, y))
    assert dot(a, b) > 0.8
    assert dot(a, c) < 0.3
    i = IdentityEmbedder()(["x", "y", "x"])
    assert i[0] == i[2] and dot(i[0], i[1]) == 0
