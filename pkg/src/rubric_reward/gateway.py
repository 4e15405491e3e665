"""Cached, rate-limited access to chat-completion endpoints.

All model traffic (teachers, rubric writer, judge, evaluators) goes through
:class:`Gateway.chat_complete`. Responses are cached by a content hash of the
request, so identical requests hit the model at most once per store.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Union

import httpx

from .errors import (
    ConfigError,
    EndpointUnknown,
    FixtureMalformed,
    FixtureMissing,
    ImageUnreadable,
    NonSuccessStatus,
    TransportFailure,
)

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

MOCK_SCHEME = "mock://"


@dataclass(frozen=True)
class EndpointConfig:
    name: str
    base_url: str
    model_id: str
    api_key_env: str | None = None
    max_concurrency: int = 4
    timeout: float = 60.0
    max_retries: int = 3
    fixtures: str | None = None

    def __post_init__(self):
        if not self.name:
            raise ConfigError("endpoint name must be non-empty")
        if self.max_concurrency < 1:
            raise ConfigError(f"{self.name}: max_concurrency must be >= 1")
        if self.timeout <= 0:
            raise ConfigError(f"{self.name}: timeout must be > 0")
        if self.max_retries < 0:
            raise ConfigError(f"{self.name}: max_retries must be >= 0")

    @property
    def is_mock(self) -> bool:
        return self.base_url.startswith(MOCK_SCHEME)


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    ref: str  # file path, http(s) URL or data: URL


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class ChatRequest:
    endpoint: str
    system_prompt: str
    user_parts: tuple[Part, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "user_parts", tuple(self.user_parts))
        if not self.user_parts:
            raise ValueError("user_parts must be non-empty")
        if sum(isinstance(p, ImagePart) for p in self.user_parts) > 1:
            raise ValueError("at most one image part per request")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    @property
    def image(self) -> ImagePart | None:
        for p in self.user_parts:
            if isinstance(p, ImagePart):
                return p
        return None

    def text(self) -> str:
        """The concatenated text parts (what a text-only judge sees)."""
        return "".join(p.text for p in self.user_parts if isinstance(p, TextPart))


@dataclass
class ChatExchange:
    request: ChatRequest
    response_text: str
    latency: float
    cache_hit: bool
    attempt_count: int
    digest: str


# -- images and digests ----------------------------------------------------


def read_image_bytes(ref: str, timeout: float = 30.0) -> bytes:
    try:
        if ref.startswith("data:"):
            _, _, payload = ref.partition(",")
            return base64.b64decode(payload, validate=True)
        if ref.startswith(("http://", "https://")):
            resp = httpx.get(ref, timeout=timeout, follow_redirects=True)
            resp.raise_for_status()
            return resp.content
        return Path(ref).read_bytes()
    except Exception as e:
        raise ImageUnreadable(f"cannot read image {ref!r}: {e}") from e


def image_mime(ref: str, data: bytes) -> str:
    if data.startswith(b"\x89PNG"):
        return "image/png"
    if data.startswith(b"\xff\xd8"):
        return "image/jpeg"
    if data[:6] in (b"GIF87a", b"GIF89a"):
        return "image/gif"
    if data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return "image/webp"
    return mimetypes.guess_type(ref)[0] or "application/octet-stream"


def _canonical_parts(parts: Iterable[Part]) -> list[dict]:
    out = []
    for p in parts:
        if isinstance(p, TextPart):
            out.append({"type": "text", "text": p.text})
        else:
            out.append({"type": "image", "sha256": hashlib.sha256(read_image_bytes(p.ref)).hexdigest()})
    return out


def request_digest(request: ChatRequest, model_id: str) -> str:
    """Stable sha256 over everything that can change a completion.

    The image contributes its content hash, not its path, so moving a file does
    not invalidate the cache but editing it does.
    """
    body = {
        "endpoint": request.endpoint,
        "model_id": model_id,
        "system_prompt": request.system_prompt,
        "user_parts": _canonical_parts(request.user_parts),
        "temperature": float(request.temperature),
        "max_tokens": int(request.max_tokens),
        "seed": request.seed,
    }
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def pretty_request(request: ChatRequest) -> str:
    parts = []
    for p in request.user_parts:
        parts.append({"text": p.text} if isinstance(p, TextPart) else {"image": p.ref})
    return json.dumps(
        {
            "endpoint": request.endpoint,
            "system_prompt": request.system_prompt,
            "user_parts": parts,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "seed": request.seed,
        },
        indent=2,
        ensure_ascii=False,
    )


# -- backends --------------------------------------------------------------


class MockBackend:
    """Deterministic fixture-driven endpoint.

    ``fixtures`` maps request digests to either a response string or an error
    directive:

    * ``{"fail_times": n, "then": "text"}`` fails ``n`` attempts (HTTP 503 by
      default, or a timeout with ``"timeout": true``, or ``"status": code``)
      and then answers ``"text"``;
    * ``{"status": code, "body": "..."}`` always fails with that status;
    * ``{"timeout": true}`` always times out.

    ``responder`` is consulted for digests without a fixture; it may return
    ``None`` to fall through to :class:`FixtureMissing`. ``delay`` sleeps inside
    each call, which makes concurrency observable in tests.
    """

    def __init__(
        self,
        fixtures: Mapping[str, str | dict] | None = None,
        responder: Callable[[ChatRequest], str | None] | None = None,
        delay: float = 0.0,
    ):
        self.fixtures = dict(fixtures or {})
        for digest, value in self.fixtures.items():
            _check_fixture(digest, value)
        self.responder = responder
        self.delay = delay
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self._attempts: dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | os.PathLike, **kwargs) -> "MockBackend":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise FixtureMalformed(f"{path}: {e}") from e
        if not isinstance(data, dict):
            raise FixtureMalformed(f"{path}: top level must be an object of digest -> response")
        return cls(data, **kwargs)

    def add(self, digest: str, value: str | dict) -> None:
        _check_fixture(digest, value)
        self.fixtures[digest] = value

    def complete(self, request: ChatRequest, config: EndpointConfig, digest: str) -> str:
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            attempt = self._attempts.get(digest, 0) + 1
            self._attempts[digest] = attempt
        try:
            if self.delay:
                time.sleep(self.delay)
            value = self.fixtures.get(digest)
            if value is None and self.responder is not None:
                value = self.responder(request)
            if value is None:
                raise FixtureMissing(digest, pretty_request(request))
            if isinstance(value, str):
                return value
            if "then" in value and attempt > value.get("fail_times", 0):
                return value["then"]
            if value.get("timeout"):
                raise TransportFailure(f"simulated timeout after {config.timeout}s")
            raise NonSuccessStatus(int(value.get("status", 503)), value.get("body", "simulated failure"))
        finally:
            with self._lock:
                self.in_flight -= 1


def _check_fixture(digest: str, value) -> None:
    if isinstance(value, str):
        return
    if not isinstance(value, dict):
        raise FixtureMalformed(f"{digest}: fixture must be a string or a directive object")
    allowed = {"fail_times", "then", "status", "body", "timeout"}
    unknown = set(value) - allowed
    if unknown:
        raise FixtureMalformed(f"{digest}: unknown directive keys {sorted(unknown)}")
    if "then" in value and not isinstance(value["then"], str):
        raise FixtureMalformed(f"{digest}: 'then' must be a string")
    if "fail_times" in value and (not isinstance(value["fail_times"], int) or value["fail_times"] < 0):
        raise FixtureMalformed(f"{digest}: 'fail_times' must be a non-negative integer")
    if "then" not in value and "status" not in value and not value.get("timeout"):
        raise FixtureMalformed(f"{digest}: directive needs 'then', 'status' or 'timeout'")


class HttpBackend:
    """OpenAI-compatible ``/chat/completions`` client."""

    def __init__(self, client: httpx.Client | None = None):
        self._client = client or httpx.Client()

    @staticmethod
    def build_payload(request: ChatRequest, config: EndpointConfig) -> dict:
        content = []
        for p in request.user_parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            elif p.ref.startswith(("http://", "https://", "data:")):
                content.append({"type": "image_url", "image_url": {"url": p.ref}})
            else:
                data = read_image_bytes(p.ref)
                url = f"data:{image_mime(p.ref, data)};base64,{base64.b64encode(data).decode('ascii')}"
                content.append({"type": "image_url", "image_url": {"url": url}})
        messages = []
        if request.system_prompt:
            messages.append({"role": "system", "content": request.system_prompt})
        messages.append({"role": "user", "content": content})
        payload = {
            "model": config.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        return payload

    def complete(self, request: ChatRequest, config: EndpointConfig, digest: str) -> str:
        headers = {"Content-Type": "application/json"}
        if config.api_key_env:
            key = os.environ.get(config.api_key_env)
            if not key:
                raise ConfigError(f"{config.name}: environment variable {config.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        url = config.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self._client.post(
                url, json=self.build_payload(request, config), headers=headers, timeout=config.timeout
            )
        except httpx.TransportError as e:
            raise TransportFailure(f"{config.name}: {type(e).__name__}: {e}") from e
        if resp.status_code != 200:
            raise NonSuccessStatus(resp.status_code, resp.text)
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise NonSuccessStatus(resp.status_code, f"unexpected response body: {resp.text[:500]}") from e
        if isinstance(content, list):
            content = "".join(c.get("text", "") for c in content if isinstance(c, dict))
        if not isinstance(content, str):
            raise NonSuccessStatus(resp.status_code, "response content is not text")
        return content


# -- gateway ---------------------------------------------------------------


class _MemoryCache:
    def __init__(self):
        self._d: dict[str, str] = {}

    def cache_get(self, digest):
        return self._d.get(digest)

    def cache_put(self, digest, text, endpoint):
        self._d.setdefault(digest, text)


class Gateway:
    """Routes requests to endpoints with caching, retries and concurrency limits."""

    def __init__(
        self,
        endpoints: Iterable[EndpointConfig] = (),
        store=None,
        backoff_base: float = 0.5,
        backoff_max: float = 8.0,
        sleep: Callable[[float], None] = time.sleep,
        http_client: httpx.Client | None = None,
    ):
        self.endpoints: dict[str, EndpointConfig] = {}
        self._backends: dict[str, object] = {}
        self._sems: dict[str, threading.BoundedSemaphore] = {}
        self.cache = store if store is not None else _MemoryCache()
        self.backoff_base = backoff_base
        self.backoff_max = backoff_max
        self._sleep = sleep
        self._http = HttpBackend(http_client)
        self._flight_locks: dict[str, threading.Lock] = {}
        self._lock = threading.Lock()
        self.model_calls = 0
        for ep in endpoints:
            self.add_endpoint(ep)

    def add_endpoint(self, config: EndpointConfig, backend=None) -> None:
        self.endpoints[config.name] = config
        self._sems[config.name] = threading.BoundedSemaphore(config.max_concurrency)
        if backend is not None:
            self._backends[config.name] = backend
        elif config.is_mock and config.fixtures:
            self._backends[config.name] = MockBackend.from_file(config.fixtures)
        elif config.is_mock:
            self._backends[config.name] = MockBackend()

    def register_mock(
        self, name: str, backend: MockBackend, model_id: str = "mock", **config_kwargs
    ) -> EndpointConfig:
        cfg = self.endpoints.get(name) or EndpointConfig(
            name=name, base_url=MOCK_SCHEME + name, model_id=model_id, **config_kwargs
        )
        self.add_endpoint(cfg, backend)
        return cfg

    def backend(self, name: str):
        self.config(name)
        return self._backends.get(name, self._http)

    def config(self, name: str) -> EndpointConfig:
        try:
            return self.endpoints[name]
        except KeyError:
            raise EndpointUnknown(name) from None

    def request_digest(self, request: ChatRequest) -> str:
        return request_digest(request, self.config(request.endpoint).model_id)

    def cached(self, request: ChatRequest) -> str | None:
        return self.cache.cache_get(self.request_digest(request))

    def _flight_lock(self, digest: str) -> threading.Lock:
        with self._lock:
            return self._flight_locks.setdefault(digest, threading.Lock())

    def chat_complete(self, request: ChatRequest) -> ChatExchange:
        config = self.config(request.endpoint)
        backend = self._backends.get(config.name, self._http)
        digest = request_digest(request, config.model_id)
        t0 = time.monotonic()
        # single-flight: concurrent identical requests wait for the first one
        with self._flight_lock(digest):
            hit = self.cache.cache_get(digest)
            if hit is not None:
                return ChatExchange(request, hit, time.monotonic() - t0, True, 0, digest)
            text, attempts = self._call_with_retries(backend, request, config, digest)
            self.cache.cache_put(digest, text, config.name)
        return ChatExchange(request, text, time.monotonic() - t0, False, attempts, digest)

    def _call_with_retries(self, backend, request, config, digest) -> tuple[str, int]:
        last: Exception | None = None
        for attempt in range(1, config.max_retries + 2):
            try:
                with self._sems[config.name]:
                    with self._lock:
                        self.model_calls += 1
                    return backend.complete(request, config, digest), attempt
            except NonSuccessStatus as e:
                if not e.retryable:
                    raise
                last = e
            except TransportFailure as e:
                last = e
            if attempt <= config.max_retries:
                delay = min(self.backoff_max, self.backoff_base * 2 ** (attempt - 1))
                delay *= random.uniform(0.5, 1.0)
                log.info("%s: attempt %d failed (%s); retrying in %.2fs", config.name, attempt, last, delay)
                if delay > 0:
                    self._sleep(delay)
        err = TransportFailure(f"{config.name}: gave up after {config.max_retries + 1} attempts: {last}",
                               attempts=config.max_retries + 1)
        raise err from last


def endpoints_from_tables(entries: list[dict], base: Path, source: str = "config") -> list[EndpointConfig]:
    """Build endpoint configs from TOML tables; fixture paths resolve against ``base``.

    API keys are never taken from the file, only the name of the environment
    variable that holds them.
    """
    out = []
    allowed = set(EndpointConfig.__dataclass_fields__)
    for i, entry in enumerate(entries):
        if "api_key" in entry:
            raise ConfigError(f"{source}: endpoints[{i}] has a literal api_key; use api_key_env")
        unknown = set(entry) - allowed
        if unknown:
            raise ConfigError(f"{source}: endpoints[{i}] has unknown keys {sorted(unknown)}")
        entry = dict(entry)
        if entry.get("fixtures"):
            entry["fixtures"] = str((base / entry["fixtures"]).resolve())
        try:
            out.append(EndpointConfig(**entry))
        except TypeError as e:
            raise ConfigError(f"{source}: endpoints[{i}]: {e}") from e
    names = [e.name for e in out]
    if len(names) != len(set(names)):
        raise ConfigError(f"{source}: duplicate endpoint names")
    return out


def load_endpoints(path: str | os.PathLike) -> list[EndpointConfig]:
    """Read ``[[endpoints]]`` tables from a TOML file."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e
    return endpoints_from_tables(data.get("endpoints", []), path.parent, str(path))
