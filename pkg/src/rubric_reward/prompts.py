"""Prompt templates and their slot substitution.

Templates ship as text files next to this module and are checksummed on first
load; an edited template fails loudly instead of silently changing every
digest downstream.

Three substitution styles are in play, matching how each template is written:

* rubric-writer user prompt: ``{{SLOT}}`` placeholders, teacher list rebuilt
  for the actual committee size;
* judge, Likert and pairwise prompts: ``str.format`` (literal braces are
  doubled in the template);
* blind-rank prompt: its JSON example uses single braces, so only the
  ``{captions_text}`` slot is replaced.
"""

from __future__ import annotations

import hashlib
import re
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .errors import ConfigError

TEMPLATE_NAMES = (
    "rubric_writer_system",
    "rubric_writer_user",
    "rubric_judge",
    "likert_direct",
    "likert_reference",
    "pairwise_duel",
    "blind_rank",
)

# Rollout / teacher captioning condition.
CAPTION_SYSTEM_PROMPT = (
    "You are an expert at describing images in detail. Provide comprehensive, accurate captions "
    "that describe the main subjects, their actions, the setting, and important visual details in the image."
)
CAPTION_USER_PROMPT = "Describe this image in detail."

RANK_LABELS = ("Caption A", "Caption B", "Caption C", "Caption D", "Caption E")

_TEACHER_LINE = re.compile(r"^\d+\. \*\*Model \d+:\*\* \{\{CANDIDATE_\d+\}\}$")


def _pkg_files():
    return resources.files(__package__) / "templates"


@lru_cache(maxsize=None)
def _checksums() -> dict[str, str]:
    out = {}
    for line in (_pkg_files() / "CHECKSUMS").read_text(encoding="utf-8").splitlines():
        if line.strip():
            digest, name = line.split()
            out[name] = digest
    return out


@lru_cache(maxsize=None)
def template(name: str) -> str:
    if name not in TEMPLATE_NAMES:
        raise KeyError(name)
    raw = (_pkg_files() / f"{name}.txt").read_bytes()
    expected = _checksums().get(f"{name}.txt")
    if hashlib.sha256(raw).hexdigest() != expected:
        raise ConfigError(f"prompt template {name}.txt does not match its checksum")
    return raw.decode("utf-8")


def verify_templates() -> None:
    for name in TEMPLATE_NAMES:
        template(name)


def rubric_writer_system() -> str:
    return template("rubric_writer_system")


def rubric_writer_user(student_caption: str, teachers: Sequence[tuple[str, str]]) -> str:
    """Text of the rubric-writer user prompt (everything after the image).

    ``teachers`` is a sequence of ``(anonymized_label, caption)`` in the order
    they should be listed.
    """
    lines = template("rubric_writer_user").split("\n")
    if lines[0] != "{{IMAGE}}":
        raise ConfigError("rubric_writer_user template must start with the image slot")
    lines = lines[1:]
    idx = [i for i, line in enumerate(lines) if _TEACHER_LINE.match(line)]
    first, last = idx[0], idx[-1]
    teacher_lines = [f"{n}. **{label}:** {caption}" for n, (label, caption) in enumerate(teachers, start=1)]
    head = [line.replace("{{WEAK_STUDENT_CAPTION}}", student_caption) if "{{WEAK_STUDENT_CAPTION}}" in line else line
            for line in lines[:first]]
    return "\n".join(head + teacher_lines + lines[last + 1:])


def rubric_judge(criterion: str, description: str, evaluation_rule: str, generated_caption: str) -> str:
    return template("rubric_judge").format(
        criterion=criterion,
        description=description,
        evaluation_rule=evaluation_rule,
        generated_caption=generated_caption,
    )


def likert_direct(generated_caption: str) -> str:
    return template("likert_direct").format(generated_caption=generated_caption)


def likert_reference(reference_caption: str, generated_caption: str) -> str:
    return template("likert_reference").format(
        reference_caption=reference_caption, generated_caption=generated_caption
    )


def pairwise_duel(caption_a: str, caption_b: str) -> str:
    return template("pairwise_duel").format(caption_a=caption_a, caption_b=caption_b)


def captions_block(labeled: Sequence[tuple[str, str]]) -> str:
    """Render ``(label, caption)`` pairs as the ranking prompt's caption list."""
    return "\n\n".join(f"{label}:\n{caption}" for label, caption in labeled)


def blind_rank(captions_text: str) -> str:
    tpl = template("blind_rank")
    if tpl.count("{captions_text}") != 1:
        raise ConfigError("blind_rank template must contain exactly one {captions_text} slot")
    return tpl.replace("{captions_text}", captions_text)
