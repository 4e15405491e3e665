"""Pull a JSON object out of free-form model output.

Models are asked for a ```json fenced block but routinely add prose, drop the
fence, or emit a bare object. Extraction order:

1. the first fence tagged ``json`` (case-insensitive),
2. the first untagged fence whose body starts with ``{``,
3. the first balanced top-level ``{...}`` span that parses.

There is no repair step; malformed JSON is reported with its byte offset.
"""

from __future__ import annotations

import json
import re
from typing import Any

from .errors import JsonMalformed, NoJsonFound, SchemaViolation

_FENCE = re.compile(r"```([A-Za-z0-9_-]*)[ \t]*\r?\n?(.*?)```", re.S)


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def _balanced_spans(text: str):
    """Yield (start, end) of each balanced top-level brace span, string-aware."""
    i = 0
    n = len(text)
    while i < n:
        start = text.find("{", i)
        if start < 0:
            return
        depth = 0
        in_str = False
        esc = False
        j = start
        while j < n:
            ch = text[j]
            if in_str:
                if esc:
                    esc = False
                elif ch == "\\":
                    esc = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    yield start, j + 1
                    break
            j += 1
        else:
            # unterminated object: report it and stop scanning
            yield start, None
            return
        i = j + 1


def _loads(text: str, body: str, base: int) -> Any:
    try:
        return json.loads(body)
    except json.JSONDecodeError as e:
        raise JsonMalformed(e.msg, _byte_offset(text, base + e.pos)) from None


def extract_json_object(text: str) -> dict:
    """Return the first JSON object found in ``text``."""
    fences = list(_FENCE.finditer(text))
    chosen = None
    for m in fences:
        if m.group(1).lower() == "json":
            chosen = m
            break
    if chosen is None:
        for m in fences:
            if not m.group(1) and m.group(2).lstrip().startswith("{"):
                chosen = m
                break
    if chosen is not None:
        obj = _loads(text, chosen.group(2), chosen.start(2))
    else:
        obj = None
        first_error: JsonMalformed | None = None
        for start, end in _balanced_spans(text):
            if end is None:
                first_error = first_error or JsonMalformed("unterminated object", _byte_offset(text, start))
                break
            try:
                obj = _loads(text, text[start:end], start)
                break
            except JsonMalformed as e:
                first_error = first_error or e
        if obj is None:
            if first_error is not None:
                raise first_error
            raise NoJsonFound("no JSON object in model output")
    if not isinstance(obj, dict):
        raise SchemaViolation("<root>", f"expected a JSON object, got {type(obj).__name__}")
    return obj
