"""Chat-completion and embedding backends.

``HttpBackend`` speaks the common OpenAI-style JSON contract over httpx with
bounded concurrency and exponential backoff. ``ScriptedChat`` and the two
embedders at the bottom are deterministic stand-ins used by tests and by
offline runs (``mock:`` and ``hashing:`` endpoints).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx

from .errors import BackendError, ContractError, PreconditionError, RequestError

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({408, 409, 425, 429})


@dataclass(frozen=True)
class ChatRequest:
    system: str
    user: str
    temperature: float = 0.0
    max_tokens: int = 4096
    model_id: str = ""
    # extra user turns appended after ``user`` (checker feedback)
    followups: tuple[str, ...] = ()
    # routing hints for scripted backends; never sent over the wire
    stage: str = ""
    subject: str = ""

    def __post_init__(self):
        if not self.user:
            raise PreconditionError("ChatRequest.user must be non-empty")
        if self.temperature < 0:
            raise PreconditionError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise PreconditionError("max_tokens must be positive")

    def messages(self) -> list[dict[str, str]]:
        msgs = []
        if self.system:
            msgs.append({"role": "system", "content": self.system})
        msgs.append({"role": "user", "content": self.user})
        msgs += [{"role": "user", "content": f} for f in self.followups]
        return msgs

    def prompt_hash(self) -> str:
        blob = json.dumps(self.messages(), ensure_ascii=False, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str
    token: str | None = None
    model: str = ""
    max_in_flight: int = 4
    max_attempts: int = 3
    base_backoff: float = 0.5
    timeout: float = 120.0
    chat_path: str = "/chat/completions"
    embed_path: str = "/embeddings"
    temperature: float = 0.0
    max_tokens: int = 4096

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise PreconditionError("max_in_flight must be >= 1")
        if self.max_attempts < 1:
            raise PreconditionError("max_attempts must be >= 1")
        if self.base_backoff < 0:
            raise PreconditionError("base_backoff must be >= 0")

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any], env_prefix: str | None = None) -> "BackendConfig":
        """Build from a config section; ``{env_prefix}_ENDPOINT`` / ``_TOKEN`` / ``_MODEL`` win if set."""
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise PreconditionError(f"unknown backend option(s): {sorted(unknown)}")
        values = dict(doc)
        if env_prefix:
            for key in ("endpoint", "token", "model"):
                env = os.environ.get(f"{env_prefix}_{key.upper()}")
                if env:
                    values[key] = env
        if "endpoint" not in values:
            raise PreconditionError("backend config needs an endpoint")
        return cls(**values)


class ChatBackend(Protocol):
    def chat(self, req: ChatRequest) -> str: ...


class EmbedBackend(Protocol):
    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


def _check_vectors(vectors: Sequence[Sequence[float]], n: int) -> list[list[float]]:
    if len(vectors) != n:
        raise ContractError(f"expected {n} vectors, got {len(vectors)}")
    dims = {len(v) for v in vectors}
    if len(dims) > 1:
        raise ContractError(f"vectors have mixed dimensions {sorted(dims)}")
    if dims == {0}:
        raise ContractError("vectors are empty")
    return [[float(x) for x in v] for v in vectors]


class HttpBackend:
    def __init__(
        self,
        cfg: BackendConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        embed_batch_size: int = 64,
    ):
        self.cfg = cfg
        self._sleep = sleep
        self._limiter = threading.BoundedSemaphore(cfg.max_in_flight)
        self._lock = threading.Lock()
        self.embed_batch_size = embed_batch_size
        self.attempts = 0
        self.retries = 0
        headers = {"Content-Type": "application/json"}
        if cfg.token:
            headers["Authorization"] = f"Bearer {cfg.token}"
        self._client = httpx.Client(
            base_url=cfg.endpoint.rstrip("/"), headers=headers, timeout=cfg.timeout, transport=transport
        )

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, path: str, payload: dict) -> Any:
        last: str = ""
        for attempt in range(1, self.cfg.max_attempts + 1):
            if attempt > 1:
                with self._lock:
                    self.retries += 1
                self._sleep(self.cfg.base_backoff * 2 ** (attempt - 2))
            with self._limiter:
                with self._lock:
                    self.attempts += 1
                try:
                    resp = self._client.post(path, json=payload)
                except httpx.TimeoutException as exc:
                    last = f"timeout: {exc}"
                    continue
                except httpx.TransportError as exc:
                    last = f"transport error: {exc}"
                    continue
            code = resp.status_code
            if code in RETRYABLE_STATUS or code >= 500:
                last = f"HTTP {code}"
                log.debug("retryable %s from %s (attempt %d)", last, path, attempt)
                continue
            if code >= 400:
                raise RequestError(f"HTTP {code} from {path}: {resp.text[:200]}", code)
            try:
                return resp.json()
            except ValueError as exc:
                raise ContractError(f"non-JSON response from {path}") from exc
        raise BackendError(f"{path}: giving up after {self.cfg.max_attempts} attempt(s) ({last})")

    def chat(self, req: ChatRequest) -> str:
        payload = {
            "model": req.model_id or self.cfg.model,
            "messages": req.messages(),
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        body = self._post(self.cfg.chat_path, payload)
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ContractError("chat response lacks choices[0].message.content") from exc
        if not isinstance(content, str):
            raise ContractError("chat completion content is not a string")
        return content

    def _embed_batch(self, texts: list[str]) -> list[list[float]]:
        body = self._post(self.cfg.embed_path, {"model": self.cfg.model, "input": texts})
        if isinstance(body, Mapping) and "data" in body:
            items = body["data"]
            try:
                if all("index" in it for it in items):
                    items = sorted(items, key=lambda it: it["index"])
                vectors = [it["embedding"] for it in items]
            except (KeyError, TypeError) as exc:
                raise ContractError("embedding response items lack 'embedding'") from exc
        elif isinstance(body, Mapping) and "embeddings" in body:
            vectors = body["embeddings"]
        else:
            raise ContractError("embedding response has neither 'data' nor 'embeddings'")
        return _check_vectors(vectors, len(texts))

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        texts = list(texts)
        if not texts:
            raise PreconditionError("embed() needs at least one text")
        out: list[list[float]] = []
        for i in range(0, len(texts), self.embed_batch_size):
            out += self._embed_batch(texts[i : i + self.embed_batch_size])
        return _check_vectors(out, len(texts))

    __call__ = embed


def chat(req: ChatRequest, cfg: BackendConfig) -> str:
    with HttpBackend(cfg) as backend:
        return backend.chat(req)


def embed(texts: Sequence[str], cfg: BackendConfig) -> list[list[float]]:
    with HttpBackend(cfg) as backend:
        return backend.embed(texts)


@dataclass
class ScriptedCall:
    index: int
    stage: str
    subject: str
    prompt_hash: str
    request: ChatRequest


class ScriptedChat:
    """Deterministic chat backend.

    ``script`` is either a list of replies consumed in call order, a mapping
    from routing key to a list of replies, or a callable ``(request, call_index)
    -> reply``. Mapping keys are tried as ``"stage:subject"``, ``"stage"``, then
    ``"*"``; each key keeps its own cursor and repeats its last reply once
    exhausted. Replies that are exceptions are raised instead of returned.
    """

    def __init__(self, script: Sequence[Any] | Mapping[str, Sequence[Any]] | Callable[[ChatRequest, int], Any]):
        self._script = script
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()
        self.calls: list[ScriptedCall] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedChat":
        doc = json.loads(Path(path).read_text("utf-8"))
        if not isinstance(doc, (list, dict)):
            raise PreconditionError(f"{path}: mock script must be a list or an object")
        return cls(doc)

    def _next_from(self, key: str, replies: Sequence[Any]) -> Any:
        k = self._cursor.get(key, 0)
        self._cursor[key] = k + 1
        return replies[min(k, len(replies) - 1)]

    def chat(self, req: ChatRequest) -> str:
        with self._lock:
            index = len(self.calls)
            self.calls.append(ScriptedCall(index, req.stage, req.subject, req.prompt_hash(), req))
            script = self._script
            if callable(script):
                reply = None
            elif isinstance(script, Mapping):
                for key in (f"{req.stage}:{req.subject}", req.stage, "*"):
                    if key in script and script[key]:
                        reply = self._next_from(key, script[key])
                        break
                else:
                    raise BackendError(f"scripted backend has no reply for {req.stage}:{req.subject}")
            else:
                if index >= len(script):
                    raise BackendError(f"scripted backend exhausted after {len(script)} replies")
                reply = script[index]
        if callable(script):
            reply = script(req, index)
        if isinstance(reply, BaseException):
            raise reply
        return str(reply)

    def count(self, stage: str, subject: str | None = None) -> int:
        return sum(1 for c in self.calls if c.stage == stage and (subject is None or c.subject == subject))


class HashingEmbedder:
    """Character n-gram hashing embedder; similar spellings get high cosine."""

    def __init__(self, dim: int = 512, n: int = 3):
        self.dim = dim
        self.n = n

    def _vector(self, text: str) -> list[float]:
        vec = [0.0] * self.dim
        padded = f"  {text.lower()}  "
        for i in range(len(padded) - self.n + 1):
            gram = padded[i : i + self.n]
            h = int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "little")
            vec[h % self.dim] += 1.0
        norm = math.sqrt(sum(x * x for x in vec)) or 1.0
        return [x / norm for x in vec]

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            raise PreconditionError("embed() needs at least one text")
        return [self._vector(t) for t in texts]

    __call__ = embed


class IdentityEmbedder:
    """One-hot per distinct text within a call: distinct texts are orthogonal."""

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        if not texts:
            raise PreconditionError("embed() needs at least one text")
        vocab = {t: i for i, t in enumerate(dict.fromkeys(texts))}
        out = []
        for t in texts:
            v = [0.0] * len(vocab)
            v[vocab[t]] = 1.0
            out.append(v)
        return out

    __call__ = embed


def make_chat_backend(cfg: BackendConfig) -> ChatBackend:
    if cfg.endpoint.startswith("mock:"):
        return ScriptedChat.from_file(cfg.endpoint[len("mock:") :])
    return HttpBackend(cfg)


def make_embedder(cfg: BackendConfig | None):
    if cfg is None or cfg.endpoint.startswith("hashing:"):
        return HashingEmbedder()
    if cfg.endpoint.startswith("identity:"):
        return IdentityEmbedder()
    return HttpBackend(cfg)
