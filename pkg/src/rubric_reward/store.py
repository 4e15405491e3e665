"""Append-only record log and content-addressed response cache.

Layout under the store root::

    cache/<dd>/<digest>.json      one file per cached response
    records/rubrics.jsonl         rubric_set envelopes
    records/verdicts.jsonl        verdict envelopes
    records/eval.jsonl            duel and rank envelopes
    records/trace.jsonl           training-trace envelopes

Every record line carries a sha256 over its canonical JSON so that torn or
edited lines are detected on read. A line only counts once its newline is on
disk; anything after the last newline is a torn tail from an interrupted
write and is skipped (and cut off before the next append).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterator

import jsonschema
from filelock import FileLock

from .errors import CacheConflict, IoFailure, SchemaViolation, StoreCorrupt

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

RECORD_FILES = {
    "rubric_set": "rubrics.jsonl",
    "verdict": "verdicts.jsonl",
    "duel": "eval.jsonl",
    "rank": "eval.jsonl",
    "trace": "trace.jsonl",
}

_STR = {"type": "string"}
_NUM = {"type": "number"}
_INT = {"type": "integer"}

_RUBRIC_ITEM = {
    "type": "object",
    "required": [
        "criterion", "description", "evaluation_rule", "weight", "justification",
        "student_already_met", "reference_teachers", "teacher_consensus",
    ],
    "properties": {
        "criterion": {"type": "string", "minLength": 1},
        "evaluation_rule": {"type": "string", "minLength": 1},
        "weight": {"enum": [1.0, 2.0, 3.0]},
        "student_already_met": {"type": "boolean"},
        "reference_teachers": {"type": "array", "items": _STR},
    },
}

PAYLOAD_SCHEMAS: dict[str, dict] = {
    "rubric_set": {
        "type": "object",
        "required": ["image_ref", "student_caption", "items", "committee_size", "writer_exchange_digest"],
        "properties": {
            "image_ref": _STR,
            "student_caption": _STR,
            "items": {"type": "array", "minItems": 1, "items": _RUBRIC_ITEM},
            "committee_size": {"type": "integer", "minimum": 1},
            "writer_exchange_digest": _STR,
        },
    },
    "verdict": {
        "type": "object",
        "required": ["image_ref", "rollout_index", "criterion_index", "score", "reasoning", "exchange_digest"],
        "properties": {
            "image_ref": _STR,
            "rollout_index": _INT,
            "criterion_index": _INT,
            "score": {"enum": [0, 1]},
            "reasoning": _STR,
        },
    },
    "duel": {
        "type": "object",
        "required": [
            "image_ref", "caption_left", "caption_right", "left_source", "right_source",
            "judgment", "reason", "position_seed",
        ],
        "properties": {"judgment": {"enum": ["A", "B", "Tie"]}, "position_seed": _INT},
    },
    "rank": {
        "type": "object",
        "required": ["image_ref", "entries", "ranking"],
        "properties": {
            "entries": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": [
                        "label", "source", "accuracy", "completeness", "clarity",
                        "hallucination_penalty", "total_score",
                    ],
                    "properties": {
                        "accuracy": {"type": "integer", "minimum": 0, "maximum": 10},
                        "completeness": {"type": "integer", "minimum": 0, "maximum": 10},
                        "clarity": {"type": "integer", "minimum": 0, "maximum": 10},
                        "hallucination_penalty": {"type": "integer", "minimum": 0, "maximum": 10},
                        "total_score": _NUM,
                    },
                },
            },
            "ranking": {"type": "array", "items": _STR},
        },
    },
    "trace": {
        "type": "object",
        "required": ["step", "loss", "reward_mean", "reward_std", "advantages", "grad_norm", "learning_rate"],
        "properties": {"step": _INT, "loss": _NUM, "advantages": {"type": "array", "items": _NUM}},
    },
}

# (kind, from_version) -> payload upgrader to from_version + 1
MIGRATIONS: dict[tuple[str, int], Callable[[dict], dict]] = {}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _canonical(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@lru_cache(maxsize=None)
def _validator(kind: str):
    schema = PAYLOAD_SCHEMAS[kind]
    cls = jsonschema.validators.validator_for(schema)
    cls.check_schema(schema)
    return cls(schema)


def validate_payload(kind: str, payload: dict) -> None:
    if kind not in PAYLOAD_SCHEMAS:
        raise SchemaViolation("kind", f"unknown record kind {kind!r}")
    try:
        _validator(kind).validate(payload)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<payload>"
        raise SchemaViolation(where, e.message) from None


@dataclass
class RecordEnvelope:
    kind: str
    payload: dict
    schema_version: int = SCHEMA_VERSION
    written_at: str = field(default_factory=_now)

    def to_line(self) -> str:
        body = {
            "kind": self.kind,
            "schema_version": self.schema_version,
            "written_at": self.written_at,
            "payload": self.payload,
        }
        body["sha256"] = hashlib.sha256(_canonical(body)).hexdigest()
        return json.dumps(body, ensure_ascii=False) + "\n"

    @classmethod
    def from_line(cls, line: str) -> "RecordEnvelope":
        try:
            body = json.loads(line)
            checksum = body.pop("sha256")
        except (json.JSONDecodeError, KeyError, AttributeError, TypeError) as e:
            raise StoreCorrupt(f"unreadable record line: {e}") from None
        if hashlib.sha256(_canonical(body)).hexdigest() != checksum:
            raise StoreCorrupt("record checksum mismatch")
        env = cls(
            kind=body["kind"],
            payload=body["payload"],
            schema_version=body["schema_version"],
            written_at=body["written_at"],
        )
        while env.schema_version < SCHEMA_VERSION:
            upgrade = MIGRATIONS.get((env.kind, env.schema_version))
            if upgrade is None:
                raise StoreCorrupt(f"no migration for {env.kind} v{env.schema_version}")
            env.payload = upgrade(env.payload)
            env.schema_version += 1
        return env


@dataclass
class CacheEntry:
    digest: str
    response_text: str
    created_at: str
    endpoint: str


class Store:
    """Single-writer, multi-reader store rooted at a directory."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.cache_dir = self.root / "cache"
        self.records_dir = self.root / "records"
        try:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            self.records_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IoFailure(str(e)) from e
        self._lock = FileLock(str(self.root / ".writer.lock"))
        self._thread_lock = threading.Lock()
        self.torn_tails: dict[str, int] = {}

    # -- cache -------------------------------------------------------------

    def _cache_path(self, digest: str) -> Path:
        return self.cache_dir / digest[:2] / f"{digest}.json"

    def cache_get(self, digest: str) -> str | None:
        path = self._cache_path(digest)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            return None
        except OSError as e:
            raise IoFailure(str(e)) from e
        try:
            entry = json.loads(raw)
            text = entry["response_text"]
            ok = entry["digest"] == digest and entry["sha256"] == hashlib.sha256(text.encode("utf-8")).hexdigest()
        except (json.JSONDecodeError, KeyError, TypeError, AttributeError):
            ok = False
        if not ok:
            raise StoreCorrupt(f"cache entry {digest} is corrupt")
        return text

    def cache_put(self, digest: str, response_text: str, endpoint: str) -> None:
        existing = self.cache_get(digest)
        if existing is not None:
            if existing != response_text:
                raise CacheConflict(digest)
            return
        path = self._cache_path(digest)
        entry = {
            "digest": digest,
            "response_text": response_text,
            "created_at": _now(),
            "endpoint": endpoint,
            "sha256": hashlib.sha256(response_text.encode("utf-8")).hexdigest(),
        }
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(entry, f, ensure_ascii=False)
                f.flush()
                os.fsync(f.fileno())
            try:
                # link() refuses to overwrite, so a racing writer cannot clobber us
                os.link(tmp, path)
            except FileExistsError:
                pass
            finally:
                os.unlink(tmp)
        except OSError as e:
            raise IoFailure(str(e)) from e
        if self.cache_get(digest) != response_text:
            raise CacheConflict(digest)

    def cache_entries(self) -> Iterator[CacheEntry]:
        for path in sorted(self.cache_dir.glob("*/*.json")):
            entry = json.loads(path.read_text(encoding="utf-8"))
            yield CacheEntry(entry["digest"], entry["response_text"], entry["created_at"], entry["endpoint"])

    def cache_stats(self) -> dict:
        by_endpoint: dict[str, int] = {}
        total_bytes = 0
        n = 0
        for path in self.cache_dir.glob("*/*.json"):
            n += 1
            total_bytes += path.stat().st_size
            try:
                ep = json.loads(path.read_text(encoding="utf-8"))["endpoint"]
            except (json.JSONDecodeError, KeyError):
                ep = "<corrupt>"
            by_endpoint[ep] = by_endpoint.get(ep, 0) + 1
        return {"entries": n, "bytes": total_bytes, "by_endpoint": dict(sorted(by_endpoint.items()))}

    # -- records -----------------------------------------------------------

    def record_path(self, kind: str) -> Path:
        try:
            return self.records_dir / RECORD_FILES[kind]
        except KeyError:
            raise SchemaViolation("kind", f"unknown record kind {kind!r}") from None

    def append_record(self, envelope: RecordEnvelope) -> None:
        validate_payload(envelope.kind, envelope.payload)
        data = envelope.to_line().encode("utf-8")
        path = self.record_path(envelope.kind)
        with self._thread_lock, self._lock:
            try:
                self._cut_torn_tail(path)
                fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
                try:
                    os.write(fd, data)
                    os.fsync(fd)
                finally:
                    os.close(fd)
            except OSError as e:
                raise IoFailure(str(e)) from e

    def append(self, kind: str, payload: dict) -> RecordEnvelope:
        env = RecordEnvelope(kind=kind, payload=payload)
        self.append_record(env)
        return env

    @staticmethod
    def _cut_torn_tail(path: Path) -> None:
        if not path.exists():
            return
        with open(path, "rb+") as f:
            f.seek(0, os.SEEK_END)
            size = f.tell()
            if size == 0:
                return
            f.seek(size - 1)
            if f.read(1) == b"\n":
                return
            f.seek(0)
            content = f.read()
            keep = content.rfind(b"\n") + 1
            log.warning("truncating torn tail of %s (%d bytes)", path, size - keep)
            f.truncate(keep)

    def scan_records(self, kind: str, where: dict | None = None) -> Iterator[RecordEnvelope]:
        """Yield records of ``kind`` in write order.

        ``where`` filters on payload fields by equality. A torn final line is
        skipped and its length noted in ``torn_tails``; corruption anywhere
        else raises StoreCorrupt.
        """
        path = self.record_path(kind)
        self.torn_tails.pop(str(path), None)
        if not path.exists():
            return
        with open(path, "rb") as f:
            content = f.read()
        complete, _, tail = content.rpartition(b"\n")
        if tail:
            self.torn_tails[str(path)] = len(tail)
            log.warning("ignoring torn tail in %s (%d bytes)", path, len(tail))
        for lineno, raw in enumerate(complete.split(b"\n"), start=1):
            if not raw.strip():
                continue
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError:
                raise StoreCorrupt(f"{path}:{lineno}: invalid utf-8") from None
            try:
                env = RecordEnvelope.from_line(line)
            except StoreCorrupt as e:
                raise StoreCorrupt(f"{path}:{lineno}: {e}") from None
            if env.kind != kind:
                continue
            try:
                validate_payload(env.kind, env.payload)
            except SchemaViolation as e:
                raise StoreCorrupt(f"{path}:{lineno}: {e}") from None
            if where and any(env.payload.get(k) != v for k, v in where.items()):
                continue
            yield env
