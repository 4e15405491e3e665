"""Stage one: turn a teacher committee's captions into per-image rubrics."""

from __future__ import annotations

import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, Union

from . import prompts
from .errors import (
    CommitteeCollapse,
    EmptyAfterFilter,
    EndpointUnknown,
    ImageUnreadable,
    ParseError,
    RubricRewardError,
    SampleSkipped,
    SchemaViolation,
)
from .gateway import ChatRequest, Gateway, ImagePart, TextPart, read_image_bytes
from .jsonx import extract_json_object

log = logging.getLogger(__name__)

WEIGHTS = (1.0, 2.0, 3.0)


@dataclass(frozen=True)
class TeacherCaption:
    teacher_index: int
    anonymized_label: str
    text: str


@dataclass
class RubricItem:
    criterion: str
    description: str
    evaluation_rule: str
    weight: float
    justification: str = ""
    student_already_met: bool = False
    reference_teachers: list[str] = field(default_factory=list)
    teacher_consensus: str = ""

    def __post_init__(self):
        if self.weight not in WEIGHTS:
            raise SchemaViolation("weight", f"{self.weight!r} not in {WEIGHTS}")
        if not self.criterion:
            raise SchemaViolation("criterion", "must be non-empty")
        if not self.evaluation_rule:
            raise SchemaViolation("evaluation_rule", "must be non-empty")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RubricItem":
        return _item_from_json(d, 0)


@dataclass
class RubricSet:
    image_ref: str
    student_caption: str
    items: list[RubricItem]
    committee_size: int
    writer_exchange_digest: str = ""

    @property
    def total_weight(self) -> float:
        return sum(it.weight for it in self.items)

    @property
    def weights(self) -> list[float]:
        return [it.weight for it in self.items]

    def to_dict(self) -> dict:
        return {
            "image_ref": self.image_ref,
            "student_caption": self.student_caption,
            "items": [it.to_dict() for it in self.items],
            "committee_size": self.committee_size,
            "writer_exchange_digest": self.writer_exchange_digest,
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RubricSet":
        return cls(
            image_ref=d["image_ref"],
            student_caption=d["student_caption"],
            items=[RubricItem.from_dict(it) for it in d["items"]],
            committee_size=int(d["committee_size"]),
            writer_exchange_digest=d.get("writer_exchange_digest", ""),
        )


@dataclass(frozen=True)
class Drop:
    index: int
    criterion: str
    reason: str  # AlreadyMet | InsufficientConsensus | OverCap


def default_threshold(committee_size: int) -> int:
    return max(1, math.ceil(committee_size / 2))


# -- teacher captions ------------------------------------------------------


def collect_teacher_captions(
    gateway: Gateway,
    image_ref: str,
    committee: Sequence[str],
    caption_prompt: str = prompts.CAPTION_USER_PROMPT,
    system_prompt: str = prompts.CAPTION_SYSTEM_PROMPT,
    temperature: float = 0.7,
    max_tokens: int = 1024,
    seed: int | None = None,
) -> list[TeacherCaption]:
    """Ask every committee member for a caption.

    Teachers that still fail after the gateway's retries are dropped, as long
    as at least ceil(K/2) captions come back.
    """
    if not committee:
        raise ValueError("committee must have at least one teacher")
    for name in committee:
        gateway.config(name)
    read_image_bytes(image_ref)

    def ask(name):
        req = ChatRequest(
            endpoint=name,
            system_prompt=system_prompt,
            user_parts=(ImagePart(image_ref), TextPart(caption_prompt)),
            temperature=temperature,
            max_tokens=max_tokens,
            seed=seed,
        )
        return gateway.chat_complete(req).response_text.strip()

    with ThreadPoolExecutor(max_workers=len(committee)) as pool:
        futures = [pool.submit(ask, name) for name in committee]
        out = []
        for k, (name, fut) in enumerate(zip(committee, futures), start=1):
            try:
                out.append(TeacherCaption(k, f"Model {k}", fut.result()))
            except (EndpointUnknown, ImageUnreadable):
                raise
            except RubricRewardError as e:
                log.warning("teacher %d (%s) dropped for %s: %s", k, name, image_ref, e)
    need = default_threshold(len(committee))
    if len(out) < need:
        raise CommitteeCollapse(
            f"{image_ref}: only {len(out)} of {len(committee)} teachers answered, need {need}"
        )
    return out


# -- prompt assembly -------------------------------------------------------


def build_rubric_prompt(
    image_ref: str, student_caption: str, teacher_captions: Sequence[TeacherCaption]
) -> tuple[str, tuple]:
    if not teacher_captions:
        raise ValueError("need at least one teacher caption")
    text = prompts.rubric_writer_user(
        student_caption, [(t.anonymized_label, t.text) for t in teacher_captions]
    )
    return prompts.rubric_writer_system(), (ImagePart(image_ref), TextPart(text))


# -- response parsing ------------------------------------------------------


def _coerce_bool(value, field_name: str) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("true", "false"):
        return value.strip().lower() == "true"
    raise SchemaViolation(field_name, f"expected a boolean or 'True'/'False', got {value!r}")


def _str_field(d: dict, name: str, where: str, required: bool) -> str:
    if name not in d:
        if required:
            raise SchemaViolation(f"{where}.{name}", "missing")
        return ""
    v = d[name]
    if not isinstance(v, str):
        raise SchemaViolation(f"{where}.{name}", f"expected a string, got {type(v).__name__}")
    if required and not v.strip():
        raise SchemaViolation(f"{where}.{name}", "must be non-empty")
    return v


def _item_from_json(d, i: int) -> RubricItem:
    where = f"rubrics[{i}]"
    if not isinstance(d, dict):
        raise SchemaViolation(where, "expected an object")
    w = d.get("weight")
    if isinstance(w, bool) or not isinstance(w, (int, float)) or float(w) not in WEIGHTS:
        raise SchemaViolation(f"{where}.weight", f"{w!r} is not one of 1.0, 2.0, 3.0")
    if "student_already_met" not in d:
        raise SchemaViolation(f"{where}.student_already_met", "missing")
    refs = d.get("reference_teachers", [])
    if not isinstance(refs, list) or not all(isinstance(r, str) for r in refs):
        raise SchemaViolation(f"{where}.reference_teachers", "expected a list of strings")
    return RubricItem(
        criterion=_str_field(d, "criterion", where, True),
        description=_str_field(d, "description", where, False),
        evaluation_rule=_str_field(d, "evaluation_rule", where, True),
        weight=float(w),
        justification=_str_field(d, "justification", where, False),
        student_already_met=_coerce_bool(d["student_already_met"], f"{where}.student_already_met"),
        reference_teachers=list(refs),
        teacher_consensus=_str_field(d, "teacher_consensus", where, False),
    )


def parse_rubric_response(response_text: str) -> list[RubricItem]:
    try:
        obj = extract_json_object(response_text)
        rubrics = obj.get("rubrics")
        if not isinstance(rubrics, list):
            raise SchemaViolation("rubrics", "missing or not a list")
        return [_item_from_json(d, i) for i, d in enumerate(rubrics)]
    except ParseError as e:
        e.raw = response_text
        raise


def serialize_rubric_response(items: Sequence[RubricItem]) -> str:
    """Render items the way a well-behaved rubric writer would."""
    body = {"rubrics": [dict(it.to_dict(), student_already_met=str(it.student_already_met)) for it in items]}
    return "```json\n" + json.dumps(body, indent=2, ensure_ascii=False) + "\n```"


# -- filtering -------------------------------------------------------------


def filter_rubric_set(
    raw_items: Sequence[RubricItem],
    committee_size: int,
    consensus_threshold: int | None = None,
    max_items: int | None = 12,
) -> tuple[list[RubricItem], list[Drop]]:
    """Keep only discriminative, consensus-backed criteria.

    Raises EmptyAfterFilter when nothing survives; such samples carry no
    training signal and should be skipped.
    """
    threshold = default_threshold(committee_size) if consensus_threshold is None else consensus_threshold
    if threshold < 1:
        raise ValueError("consensus_threshold must be >= 1")
    kept: list[tuple[int, RubricItem]] = []
    drops: list[Drop] = []
    for i, it in enumerate(raw_items):
        if it.student_already_met:
            drops.append(Drop(i, it.criterion, "AlreadyMet"))
        elif len(set(it.reference_teachers)) < threshold:
            drops.append(Drop(i, it.criterion, "InsufficientConsensus"))
        else:
            kept.append((i, it))
    if max_items is not None and len(kept) > max_items:
        # keep the heaviest criteria, ties by original position
        ranked = sorted(kept, key=lambda p: (-p[1].weight, p[0]))
        survivors = {i for i, _ in ranked[:max_items]}
        drops.extend(Drop(i, it.criterion, "OverCap") for i, it in kept if i not in survivors)
        kept = [p for p in kept if p[0] in survivors]
    drops.sort(key=lambda d: d.index)
    if not kept:
        raise EmptyAfterFilter(drops)
    return [it for _, it in kept], drops


# -- the full stage --------------------------------------------------------


@dataclass
class SynthesisConfig:
    rubric_writer: str
    consensus_threshold: int | None = None  # None means ceil(K/2)
    max_items: int | None = 12
    teacher_temperature: float = 0.7
    writer_temperature: float = 0.0
    teacher_max_tokens: int = 1024
    writer_max_tokens: int = 4096
    caption_prompt: str = prompts.CAPTION_USER_PROMPT
    caption_system_prompt: str = prompts.CAPTION_SYSTEM_PROMPT
    seed: int | None = None


StudentSource = Union[str, Callable[[str], str]]


def endpoint_captioner(
    gateway: Gateway, endpoint: str, temperature: float = 0.7, max_tokens: int = 1024, seed: int | None = None
) -> Callable[[str], str]:
    """A student caption source backed by a model endpoint."""

    def caption(image_ref: str) -> str:
        req = ChatRequest(
            endpoint=endpoint,
            system_prompt=prompts.CAPTION_SYSTEM_PROMPT,
            user_parts=(ImagePart(image_ref), TextPart(prompts.CAPTION_USER_PROMPT)),
            temperature=temperature,
            max_tokens=max_tokens,
            seed=seed,
        )
        return gateway.chat_complete(req).response_text.strip()

    return caption


@dataclass
class SynthesisResult:
    rubric_set: RubricSet
    drops: list[Drop]
    teachers: list[TeacherCaption]


class RubricSynthesizer:
    """Runs stage one per image, with single-flight per image_ref."""

    def __init__(self, gateway: Gateway, committee: Sequence[str], config: SynthesisConfig, store=None):
        self.gateway = gateway
        self.committee = list(committee)
        self.config = config
        self.store = store
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _image_lock(self, image_ref: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(image_ref, threading.Lock())

    def student_caption(self, image_ref: str, source: StudentSource) -> str:
        return source if isinstance(source, str) else source(image_ref)

    def teachers(self, image_ref: str, teacher_captions: Sequence[str] | None = None) -> list[TeacherCaption]:
        if teacher_captions is not None:
            return [TeacherCaption(k, f"Model {k}", t) for k, t in enumerate(teacher_captions, start=1)]
        cfg = self.config
        return collect_teacher_captions(
            self.gateway, image_ref, self.committee,
            caption_prompt=cfg.caption_prompt, system_prompt=cfg.caption_system_prompt,
            temperature=cfg.teacher_temperature, max_tokens=cfg.teacher_max_tokens, seed=cfg.seed,
        )

    def writer_request(self, image_ref: str, student: str, teachers: Sequence[TeacherCaption]) -> ChatRequest:
        system, parts = build_rubric_prompt(image_ref, student, teachers)
        return ChatRequest(
            endpoint=self.config.rubric_writer,
            system_prompt=system,
            user_parts=parts,
            temperature=self.config.writer_temperature,
            max_tokens=self.config.writer_max_tokens,
            seed=self.config.seed,
        )

    def run(
        self, image_ref: str, student_source: StudentSource, teacher_captions: Sequence[str] | None = None
    ) -> SynthesisResult:
        with self._image_lock(image_ref):
            return self._run(image_ref, student_source, teacher_captions)

    def _run(self, image_ref, student_source, teacher_captions) -> SynthesisResult:
        committee_size = len(teacher_captions) if teacher_captions is not None else len(self.committee)
        student = self.student_caption(image_ref, student_source)
        teachers = self.teachers(image_ref, teacher_captions)
        exchange = self.gateway.chat_complete(self.writer_request(image_ref, student, teachers))
        raw = parse_rubric_response(exchange.response_text)
        try:
            items, drops = filter_rubric_set(
                raw, committee_size, self.config.consensus_threshold, self.config.max_items
            )
        except EmptyAfterFilter as e:
            raise SampleSkipped(image_ref, e) from e
        rs = RubricSet(image_ref, student, items, committee_size, exchange.digest)
        if self.store is not None:
            payload = rs.to_dict()
            seen = self.store.scan_records(
                "rubric_set", {"image_ref": image_ref, "writer_exchange_digest": exchange.digest}
            )
            if next(seen, None) is None:
                self.store.append("rubric_set", payload)
        return SynthesisResult(rs, drops, teachers)


def synthesize(
    gateway: Gateway,
    image_ref: str,
    student_caption_source: StudentSource,
    committee: Sequence[str],
    config: SynthesisConfig,
    store=None,
    teacher_captions: Sequence[str] | None = None,
) -> RubricSet:
    synth = RubricSynthesizer(gateway, committee, config, store)
    return synth.run(image_ref, student_caption_source, teacher_captions).rubric_set
