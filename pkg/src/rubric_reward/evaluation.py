"""Caption evaluation protocols: anonymized pairwise duels and blind ranking."""

from __future__ import annotations

import logging
import random
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Sequence

from . import prompts
from .errors import (
    InconsistentSources,
    MissingAssessment,
    ParseError,
    SchemaViolation,
    SubjectAbsent,
)
from .gateway import ChatRequest, Gateway, ImagePart, TextPart
from .jsonx import extract_json_object

log = logging.getLogger(__name__)

JUDGMENTS = ("A", "B", "Tie")
SUB_SCORES = ("accuracy", "completeness", "clarity", "hallucination_penalty")


def _attempt_seeds(seed: int | None):
    return (seed, 1 if seed is None else seed + 1)


# -- pairwise --------------------------------------------------------------


@dataclass
class DuelRecord:
    image_ref: str
    caption_left: str
    caption_right: str
    left_source: str
    right_source: str
    judgment: str
    reason: str
    position_seed: int

    def __post_init__(self):
        if self.judgment not in JUDGMENTS:
            raise SchemaViolation("judgment", f"{self.judgment!r} not in {JUDGMENTS}")

    @property
    def winner(self) -> str | None:
        if self.judgment == "A":
            return self.left_source
        if self.judgment == "B":
            return self.right_source
        return None

    def to_dict(self) -> dict:
        return asdict(self)


def first_slot_is_a(seed: int) -> bool:
    """Seeded fair coin: does the first caption go into slot A?"""
    return random.Random(seed).random() < 0.5


def duel_request(image_ref: str, caption_a: str, caption_b: str, judge_endpoint: str,
                 seed: int | None = None) -> ChatRequest:
    return ChatRequest(
        endpoint=judge_endpoint,
        system_prompt="",
        user_parts=(ImagePart(image_ref), TextPart(prompts.pairwise_duel(caption_a, caption_b))),
        temperature=0.0,
        max_tokens=2048,
        seed=seed,
    )


def parse_duel(response_text: str) -> tuple[str, str]:
    try:
        obj = extract_json_object(response_text)
        raw = obj.get("judgment")
        if not isinstance(raw, str):
            raise SchemaViolation("judgment", "missing or not a string")
        j = {"a": "A", "b": "B", "tie": "Tie"}.get(raw.strip().lower())
        if j is None:
            raise SchemaViolation("judgment", f"{raw!r} is not A, B or Tie")
        reason = obj.get("reason", "")
        return j, reason if isinstance(reason, str) else str(reason)
    except ParseError as e:
        e.raw = response_text
        raise


def pairwise_duel(gateway: Gateway, image_ref: str, first: tuple[str, str], second: tuple[str, str],
                  judge_endpoint: str, seed: int) -> DuelRecord:
    """``first``/``second`` are ``(caption, source_tag)``; tags never reach the judge."""
    (cap1, src1), (cap2, src2) = first, second
    if not cap1.strip() or not cap2.strip():
        raise ValueError("both captions must be non-empty")
    if first_slot_is_a(seed):
        left, right = (cap1, src1), (cap2, src2)
    else:
        left, right = (cap2, src2), (cap1, src1)
    err: ParseError | None = None
    for s in _attempt_seeds(None):
        ex = gateway.chat_complete(duel_request(image_ref, left[0], right[0], judge_endpoint, s))
        try:
            judgment, reason = parse_duel(ex.response_text)
            return DuelRecord(image_ref, left[0], right[0], left[1], right[1], judgment, reason, seed)
        except ParseError as e:
            err = e
    raise err


def win_rate(records: Sequence[DuelRecord], subject_source: str) -> float:
    """(wins + 0.5 * ties) / duels for one source."""
    if not records:
        raise SubjectAbsent(f"no duels involving {subject_source!r}")
    score = 0.0
    for r in records:
        sides = (r.left_source == subject_source) + (r.right_source == subject_source)
        if sides != 1:
            raise SubjectAbsent(f"{subject_source!r} is not on exactly one side of a duel on {r.image_ref}")
        if r.judgment == "Tie":
            score += 0.5
        elif r.winner == subject_source:
            score += 1.0
    return score / len(records)


def duel_summary(records: Sequence[DuelRecord]) -> dict:
    """Win rates per unordered source pair."""
    pairs: dict[tuple[str, str], list[DuelRecord]] = {}
    for r in records:
        key = tuple(sorted((r.left_source, r.right_source)))
        pairs.setdefault(key, []).append(r)
    out = {}
    for (a, b), recs in sorted(pairs.items()):
        out[f"{a} vs {b}"] = {
            "duels": len(recs),
            "win_rate": {a: win_rate(recs, a), b: win_rate(recs, b)},
            "ties": sum(r.judgment == "Tie" for r in recs),
        }
    return out


# -- blind ranking ---------------------------------------------------------


def total_score(accuracy: int, completeness: int, clarity: int, hallucination_penalty: int) -> float:
    return (accuracy + completeness + clarity) / 3.0 - hallucination_penalty * 1.5


@dataclass
class RankEntry:
    label: str
    source: str
    accuracy: int
    completeness: int
    clarity: int
    hallucination_penalty: int
    total_score: float
    justification: str = ""
    judge_total_score: float | None = None


@dataclass
class RankRecord:
    image_ref: str
    entries: list[RankEntry]
    ranking: list[str]
    judge_ranking: list[str] = field(default_factory=list)
    position_seed: int = 0

    def entry(self, label: str) -> RankEntry:
        for e in self.entries:
            if e.label == label:
                return e
        raise KeyError(label)

    def source_ranks(self) -> dict[str, int]:
        """Source tag -> 1-based rank."""
        return {self.entry(label).source: pos for pos, label in enumerate(self.ranking, start=1)}

    def to_dict(self) -> dict:
        return {
            "image_ref": self.image_ref,
            "entries": [asdict(e) for e in self.entries],
            "ranking": list(self.ranking),
            "judge_ranking": list(self.judge_ranking),
            "position_seed": self.position_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RankRecord":
        return cls(d["image_ref"], [RankEntry(**e) for e in d["entries"]], list(d["ranking"]),
                   list(d.get("judge_ranking", [])), d.get("position_seed", 0))


def rank_order(entries: Sequence[RankEntry]) -> list[str]:
    """Labels by total_score descending; equal totals keep label order."""
    return [e.label for e in sorted(entries, key=lambda e: (-e.total_score, e.label))]


def shuffle_labels(n: int, seed: int) -> list[int]:
    """perm[i] is the index of the caption shown under label i."""
    perm = list(range(n))
    random.Random(seed).shuffle(perm)
    return perm


def rank_request(image_ref: str, labeled: Sequence[tuple[str, str]], judge_endpoint: str,
                 seed: int | None = None) -> ChatRequest:
    text = prompts.blind_rank(prompts.captions_block(labeled))
    return ChatRequest(
        endpoint=judge_endpoint,
        system_prompt="",
        user_parts=(ImagePart(image_ref), TextPart(text)),
        temperature=0.0,
        max_tokens=4096,
        seed=seed,
    )


def _sub_score(value, where: str) -> int:
    if isinstance(value, bool):
        raise SchemaViolation(where, "boolean is not a score")
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    if isinstance(value, str) and value.strip().isdigit():
        value = int(value.strip())
    if not isinstance(value, int) or not 0 <= value <= 10:
        raise SchemaViolation(where, f"{value!r} is not an integer in 0..10")
    return value


def parse_ranking(response_text: str, labels: Sequence[str]) -> tuple[dict[str, dict], list[str]]:
    """Return per-label assessments and the judge's own ranking."""
    try:
        obj = extract_json_object(response_text)
        assessments = obj.get("assessments")
        if not isinstance(assessments, dict):
            raise SchemaViolation("assessments", "missing or not an object")
        missing = [lb for lb in labels if lb not in assessments]
        if missing:
            raise MissingAssessment(f"no assessment for {', '.join(missing)}")
        out = {}
        for lb in labels:
            a = assessments[lb]
            if not isinstance(a, dict):
                raise SchemaViolation(lb, "assessment must be an object")
            parsed = {k: _sub_score(a.get(k), f"{lb}.{k}") for k in SUB_SCORES}
            parsed["justification"] = str(a.get("justification", ""))
            reported = a.get("total_score")
            parsed["judge_total_score"] = (
                float(reported) if isinstance(reported, (int, float)) and not isinstance(reported, bool) else None
            )
            out[lb] = parsed
        ranking = obj.get("ranking", [])
        if not isinstance(ranking, list):
            ranking = []
        return out, [str(x) for x in ranking]
    except ParseError as e:
        e.raw = response_text
        raise


def blind_rank(gateway: Gateway, image_ref: str, captions: Sequence[tuple[str, str]], judge_endpoint: str,
               seed: int) -> RankRecord:
    """Jointly score five ``(caption, source_tag)`` pairs under shuffled labels.

    Totals and ranking are recomputed locally; the judge's arithmetic is only
    kept for discrepancy logging.
    """
    if len(captions) != len(prompts.RANK_LABELS):
        raise ValueError(f"blind ranking needs exactly {len(prompts.RANK_LABELS)} captions")
    perm = shuffle_labels(len(captions), seed)
    labels = list(prompts.RANK_LABELS)
    labeled = [(labels[i], captions[perm[i]][0]) for i in range(len(labels))]
    err: ParseError | None = None
    for s in _attempt_seeds(None):
        ex = gateway.chat_complete(rank_request(image_ref, labeled, judge_endpoint, s))
        try:
            assessed, judge_ranking = parse_ranking(ex.response_text, labels)
            break
        except ParseError as e:
            err = e
    else:
        raise err
    entries = []
    for i, lb in enumerate(labels):
        a = assessed[lb]
        local = total_score(a["accuracy"], a["completeness"], a["clarity"], a["hallucination_penalty"])
        reported = a["judge_total_score"]
        if reported is not None and abs(reported - local) > 1e-6:
            log.warning("%s %s: judge total %.4f != recomputed %.4f; using recomputed",
                        image_ref, lb, reported, local)
        entries.append(RankEntry(lb, captions[perm[i]][1], a["accuracy"], a["completeness"], a["clarity"],
                                 a["hallucination_penalty"], local, a["justification"], reported))
    ranking = rank_order(entries)
    if judge_ranking and judge_ranking != ranking:
        log.warning("%s: judge ranking %s differs from recomputed %s", image_ref, judge_ranking, ranking)
    return RankRecord(image_ref, entries, ranking, judge_ranking, seed)


def rank_distribution(records: Sequence[RankRecord]) -> dict[str, dict]:
    """Per-source rank histogram (fractions) and mean sub-scores."""
    if not records:
        raise InconsistentSources("no rank records to aggregate")
    sources = sorted(e.source for e in records[0].entries)
    for r in records[1:]:
        if sorted(e.source for e in r.entries) != sources:
            raise InconsistentSources(f"{r.image_ref} has a different source set")
    n_ranks = len(sources)
    out = {}
    for src in sources:
        hist = [0] * n_ranks
        sums = dict.fromkeys(SUB_SCORES, 0.0)
        for r in records:
            hist[r.source_ranks()[src] - 1] += 1
            e = next(e for e in r.entries if e.source == src)
            for k in SUB_SCORES:
                sums[k] += getattr(e, k)
        out[src] = {
            "rank_histogram": [h / len(records) for h in hist],
            **{f"mean_{k}": sums[k] / len(records) for k in SUB_SCORES},
        }
    return out


def render_rank_table(dist: dict[str, dict]) -> str:
    head = f"{'source':<20}" + "".join(f"{'#' + str(i + 1):>7}" for i in range(5)) + \
        f"{'acc':>7}{'comp':>7}{'clar':>7}{'hall':>7}"
    lines = [head]
    for src, d in dist.items():
        row = f"{src[:20]:<20}" + "".join(f"{h:>7.2f}" for h in d["rank_histogram"])
        row += "".join(f"{d['mean_' + k]:>7.2f}" for k in SUB_SCORES)
        lines.append(row)
    return "\n".join(lines)


def render_duel_table(summary: dict) -> str:
    lines = [f"{'pairing':<40}{'duels':>7}{'ties':>6}  win rates"]
    for pair, d in summary.items():
        wr = ", ".join(f"{k}={v:.3f}" for k, v in d["win_rate"].items())
        lines.append(f"{pair[:40]:<40}{d['duels']:>7}{d['ties']:>6}  {wr}")
    return "\n".join(lines)


def pairings(sources: Sequence[str]) -> list[tuple[str, str]]:
    return list(combinations(sources, 2))
