"""Stage two, reward side: per-criterion judging and reward aggregation.

Also hosts the holistic Likert rewards used as baselines. The ROUGE-L
baseline lives in :mod:`rubric_reward.rouge`.
"""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

from . import prompts
from .errors import (
    AlignmentMismatch,
    MissingReference,
    ParseError,
    SchemaViolation,
    ScoreUnparseable,
    ZeroTotalWeight,
)
from .gateway import ChatRequest, Gateway, ImagePart, TextPart
from .jsonx import extract_json_object
from .rubrics import RubricItem, RubricSet

log = logging.getLogger(__name__)

PARSE_FAILURE = "judge-parse-failure"


@dataclass
class JudgeVerdict:
    criterion_index: int
    score: int
    reasoning: str
    exchange_digest: str = ""

    def __post_init__(self):
        if self.score not in (0, 1) or isinstance(self.score, bool):
            raise SchemaViolation("score", f"{self.score!r} not in {{0, 1}}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RewardResult:
    reward: float
    verdicts: list[JudgeVerdict]
    total_weight: float
    satisfied_weight: float

    def to_dict(self) -> dict:
        return {
            "reward": self.reward,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "total_weight": self.total_weight,
            "satisfied_weight": self.satisfied_weight,
        }


# -- rubric judge ----------------------------------------------------------


def build_judge_prompt(item: RubricItem, caption: str) -> str:
    return prompts.rubric_judge(item.criterion, item.description, item.evaluation_rule, caption)


def _coerce_score(value) -> int:
    if isinstance(value, bool):
        raise SchemaViolation("score", f"{value!r} is a boolean, expected 0 or 1")
    if isinstance(value, int) and value in (0, 1):
        return value
    if isinstance(value, float) and value in (0.0, 1.0):
        return int(value)
    if isinstance(value, str) and value.strip() in ("0", "1"):
        return int(value.strip())
    raise SchemaViolation("score", f"{value!r} is not 0 or 1")


def parse_verdict(response_text: str, criterion_index: int, exchange_digest: str = "") -> JudgeVerdict:
    try:
        obj = extract_json_object(response_text)
        if "score" not in obj:
            raise SchemaViolation("score", "missing")
        reasoning = obj.get("reasoning", "")
        if not isinstance(reasoning, str):
            raise SchemaViolation("reasoning", "expected a string")
        return JudgeVerdict(criterion_index, _coerce_score(obj["score"]), reasoning, exchange_digest)
    except ParseError as e:
        e.raw = response_text
        raise


def judge_request(item: RubricItem, caption: str, judge_endpoint: str, seed: int | None = None,
                  max_tokens: int = 1024) -> ChatRequest:
    # text-only: the judge template has no image slot
    return ChatRequest(
        endpoint=judge_endpoint,
        system_prompt="",
        user_parts=(TextPart(build_judge_prompt(item, caption)),),
        temperature=0.0,
        max_tokens=max_tokens,
        seed=seed,
    )


def _retry_seed(seed: int | None) -> int:
    return 1 if seed is None else seed + 1


def judge_item(gateway: Gateway, index: int, item: RubricItem, caption: str, judge_endpoint: str,
               seed: int | None = None) -> JudgeVerdict:
    """One verdict; an unparseable answer gets one fresh sample, then scores 0."""
    digest = ""
    for s in (seed, _retry_seed(seed)):
        ex = gateway.chat_complete(judge_request(item, caption, judge_endpoint, s))
        digest = ex.digest
        try:
            return parse_verdict(ex.response_text, index, ex.digest)
        except ParseError as e:
            log.info("judge output for criterion %d unparseable (%s)", index, e)
    return JudgeVerdict(index, 0, PARSE_FAILURE, digest)


def judge_caption(gateway: Gateway, caption: str, rubric_set: RubricSet, judge_endpoint: str,
                  seed: int | None = None, max_workers: int | None = None) -> list[JudgeVerdict]:
    if not rubric_set.items:
        raise ValueError("rubric set is empty")
    workers = max_workers or len(rubric_set.items)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(judge_item, gateway, i, it, caption, judge_endpoint, seed)
            for i, it in enumerate(rubric_set.items)
        ]
        return [f.result() for f in futures]


def aggregate_reward(verdicts: Sequence[JudgeVerdict], rubric_set: RubricSet | Sequence[float]) -> RewardResult:
    """Severity-weighted fraction of satisfied criteria."""
    weights = rubric_set.weights if isinstance(rubric_set, RubricSet) else [float(w) for w in rubric_set]
    if len(verdicts) != len(weights):
        raise AlignmentMismatch(f"{len(verdicts)} verdicts for {len(weights)} rubric items")
    for pos, v in enumerate(verdicts):
        if v.criterion_index != pos:
            raise AlignmentMismatch(f"verdict at position {pos} is for criterion {v.criterion_index}")
    total = math.fsum(weights)
    if total <= 0:
        raise ZeroTotalWeight("rubric weights sum to zero")
    satisfied = math.fsum(w * v.score for w, v in zip(weights, verdicts))
    return RewardResult(satisfied / total, list(verdicts), total, satisfied)


def rubric_reward(gateway: Gateway, caption: str, rubric_set: RubricSet, judge_endpoint: str,
                  seed: int | None = None) -> RewardResult:
    return aggregate_reward(judge_caption(gateway, caption, rubric_set, judge_endpoint, seed), rubric_set)


def persist_verdicts(store, image_ref: str, rollout_index: int, verdicts: Sequence[JudgeVerdict]) -> None:
    for v in verdicts:
        store.append("verdict", dict(v.to_dict(), image_ref=image_ref, rollout_index=rollout_index))


# -- Likert baselines ------------------------------------------------------

_INT_TOKEN = re.compile(r"(?<![\d.\-])\d+(?![\d])(?!\.\d)")


def parse_likert_score(text: str) -> int:
    """First integer token in 0..10; decimals and negatives are not tokens."""
    for m in _INT_TOKEN.finditer(text):
        value = int(m.group())
        if 0 <= value <= 10:
            return value
    raise ScoreUnparseable(f"no integer 0-10 in {text[:80]!r}")


def likert_request(caption: str, judge_endpoint: str, mode: str, image_ref: str,
                   reference_caption: str | None = None, seed: int | None = None,
                   max_tokens: int = 16) -> ChatRequest:
    if mode == "direct":
        text = prompts.likert_direct(caption)
    elif mode == "reference":
        if reference_caption is None:
            raise MissingReference("reference mode needs a reference caption")
        text = prompts.likert_reference(reference_caption, caption)
    else:
        raise ValueError(f"unknown Likert mode {mode!r}")
    return ChatRequest(
        endpoint=judge_endpoint,
        system_prompt="",
        user_parts=(ImagePart(image_ref), TextPart(text)),
        temperature=0.0,
        max_tokens=max_tokens,
        seed=seed,
    )


def likert_reward(gateway: Gateway, caption: str, judge_endpoint: str, mode: str, image_ref: str,
                  reference_caption: str | None = None, seed: int | None = None) -> float:
    last: ScoreUnparseable | None = None
    for s in (seed, _retry_seed(seed)):
        ex = gateway.chat_complete(likert_request(caption, judge_endpoint, mode, image_ref, reference_caption, s))
        try:
            return parse_likert_score(ex.response_text) / 10.0
        except ScoreUnparseable as e:
            e.raw = ex.response_text
            last = e
    raise last
