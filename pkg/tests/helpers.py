"""Shared test utilities: tiny images, scripted mock judges, golden inputs."""

from __future__ import annotations

import json
import re
import struct
import zlib

from rubric_reward.gateway import ChatRequest


def png_bytes(rgb=(255, 0, 0)) -> bytes:
    """A valid 1x1 RGB PNG."""

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", 1, 1, 8, 2, 0, 0, 0)
    raw = b"\x00" + bytes(rgb)
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b"")


def write_png(path, rgb=(255, 0, 0)) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_bytes(rgb))
    return str(path)


def fenced(obj) -> str:
    return "```json\n" + json.dumps(obj, indent=2) + "\n```"


_CRIT = re.compile(r"^- Criteria name: (.*)$", re.M)
_CAP = re.compile(r"GENERATED CAPTION TO EVALUATE:\n(.*?)\n\nEVALUATION INSTRUCTIONS:", re.S)


def judge_fields(request: ChatRequest) -> tuple[str, str] | None:
    text = request.text()
    m1, m2 = _CRIT.search(text), _CAP.search(text)
    if not (m1 and m2):
        return None
    return m1.group(1), m2.group(1)


def keyword_judge(rules: dict[str, str]):
    """Responder passing a caption on criterion X iff it contains rules[X]."""

    def respond(request: ChatRequest):
        f = judge_fields(request)
        if f is None:
            return None
        criterion, caption = f
        ok = rules[criterion].lower() in caption.lower()
        return fenced({"reasoning": f"keyword {'found' if ok else 'absent'}", "score": int(ok)})

    return respond


def rubric_json(items) -> str:
    return fenced({"rubrics": items})


def item(criterion, weight=2.0, refs=("Model 1", "Model 2", "Model 3"), met="False", **kw):
    d = {
        "criterion": criterion,
        "description": kw.get("description", f"checks {criterion}"),
        "evaluation_rule": kw.get("evaluation_rule", f"pass if the caption {criterion.lower()}"),
        "weight": weight,
        "justification": kw.get("justification", "teachers agree"),
        "student_already_met": met,
        "reference_teachers": list(refs),
        "teacher_consensus": kw.get("teacher_consensus", "majority agrees"),
    }
    return d


# Inputs behind tests/golden/*.txt
GOLDEN_IMAGE = "images/cake.png"
GOLDEN_STUDENT = "A cake on a table."
GOLDEN_TEACHERS = [
    "A carrot cake with white frosting reading \"24 CARROT CAKE\" sits on a wooden table.",
    "A frosted cake labeled 24 CARROT CAKE on a wooden table next to a knife.",
    "A round cake with orange piping on a table.",
    "A carrot cake on a wooden table; the top says 24 CARROT CAKE.",
    "A white cake with text on a table near a window.",
]
GOLDEN_CRITERION = "Mentions the \"24 CARROT CAKE\" inscription"
GOLDEN_DESCRIPTION = "The cake top carries a piped text inscription that most teachers report."
GOLDEN_RULE = "Pass if the caption states the cake reads 24 CARROT CAKE (case-insensitive); fail otherwise."
GOLDEN_CAPTION = "A carrot cake with \"24 CARROT CAKE\" written on top, on a wooden table."
GOLDEN_DUEL = {"base": "A cake on a table.", "ours": GOLDEN_CAPTION}
GOLDEN_RANK = {
    "base": "A cake on a table.",
    "expert": GOLDEN_TEACHERS[0],
    "large": GOLDEN_TEACHERS[1],
    "mid": GOLDEN_TEACHERS[3],
    "ours": GOLDEN_CAPTION,
}
