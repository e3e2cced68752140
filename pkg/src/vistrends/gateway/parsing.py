"""Structured-output parsing for analyst answers.

Every parser here is total: it either returns a value or raises
:class:`AnswerParseError` (a ``ValueError``) naming the defect. Nothing else
escapes, so a single garbled model answer can never take a batch job down.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

ARROWS = ("→", "->", "=>")
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+")
_START = re.compile(r"^start\s*:", re.IGNORECASE)
_END = re.compile(r"^\s*end\s*:", re.IGNORECASE)
_INDEX = re.compile(
    r"\(\s*happened\s+after\s+image\s+no\.?\s*\[?\s*(?P<idx>[^\s\])]*)\s*\]?\s*\)\s*\.?\s*$",
    re.IGNORECASE,
)
_YES_NO = re.compile(r"answer\s*:\s*\[?\s*(yes|no|y|n)\b", re.IGNORECASE)
_PLACE = re.compile(r"^p(\d+)\s*[.:)]\s*(.+)$", re.IGNORECASE)
_CHANGE = re.compile(r"^c(\d+)\s*[.:)]\s*(.+)$", re.IGNORECASE)
_COMBO = re.compile(r"^\(\s*p(\d+)\s*\+\s*c(\d+)\s*\)\s*(.+)$", re.IGNORECASE)
_REASON_TAIL = re.compile(r"\s*\(reason:.*\)\s*\.?\s*$", re.IGNORECASE)
_UNUSUAL = re.compile(r"^unusual\s*:\s*(.*)$", re.IGNORECASE)


class AnswerParseError(ValueError):
    def __init__(self, defect: str, text: str = ""):
        super().__init__(f"{defect}: {text!r}" if text else defect)
        self.defect = defect
        self.text = text


@dataclass(frozen=True)
class RawChange:
    before_desc: str
    after_desc: str
    after_index: int


def _strip_bullet(line: str) -> str:
    return _BULLET.sub("", line.strip(), count=1)


def format_change_line(change: RawChange) -> str:
    return f"Start: {change.before_desc} → End: {change.after_desc} (happened after image No.{change.after_index})"


def parse_change_line(line: str) -> RawChange:
    """Parse one ``Start: ... → End: ... (happened after image No.X)`` line."""
    if not isinstance(line, str) or not line.strip():
        raise AnswerParseError("empty line")
    text = _strip_bullet(line)
    start = _START.match(text)
    if not start:
        raise AnswerParseError("missing 'Start:'", line)
    body = text[start.end():]
    cut = min(((body.find(a), a) for a in ARROWS if a in body), default=None)
    if cut is None:
        raise AnswerParseError("missing arrow", line)
    before, rest = body[: cut[0]], body[cut[0] + len(cut[1]):]
    end = _END.match(rest)
    if not end:
        raise AnswerParseError("missing 'End:'", line)
    rest = rest[end.end():]
    idx = _INDEX.search(rest)
    if not idx:
        raise AnswerParseError("missing index", line)
    try:
        after_index = int(idx.group("idx"))
    except ValueError:
        raise AnswerParseError("non-integer index", line) from None
    before, after = before.strip(), rest[: idx.start()].strip()
    if not before or not after:
        raise AnswerParseError("empty description", line)
    return RawChange(before, after, after_index)


def parse_change_answer(text: str) -> tuple[list[RawChange], list[AnswerParseError]]:
    """Parse a whole detection answer. Lines that are not change lines become errors."""
    changes, errors = [], []
    for line in (text or "").splitlines():
        stripped = _strip_bullet(line)
        if not stripped or stripped in ("…", "..."):
            continue
        try:
            changes.append(parse_change_line(line))
        except AnswerParseError as exc:
            errors.append(exc)
    return changes, errors


def parse_yes_no(text: str) -> bool:
    m = _YES_NO.search(text or "")
    if not m:
        raise AnswerParseError("no Y/N answer", (text or "")[:200])
    return m.group(1)[0].lower() == "y"


def parse_abstractions(text: str) -> list[str]:
    """Return the place x change abstraction grid in (place, change) order.

    Level counts are taken from the enumerated ``p``/``c`` items (or the combo
    indices if the items are absent), never from the stated "[N] levels"
    header, which models get wrong. Every cell of the grid must be present.
    """
    places: dict[int, str] = {}
    kinds: dict[int, str] = {}
    combos: dict[tuple[int, int], str] = {}
    for raw in (text or "").splitlines():
        line = _strip_bullet(raw)
        if m := _COMBO.match(line):
            combos.setdefault((int(m.group(1)), int(m.group(2))), m.group(3).strip())
        elif m := _PLACE.match(line):
            places.setdefault(int(m.group(1)), _REASON_TAIL.sub("", m.group(2)).strip())
        elif m := _CHANGE.match(line):
            kinds.setdefault(int(m.group(1)), _REASON_TAIL.sub("", m.group(2)).strip())
    if not combos:
        raise AnswerParseError("no abstraction combinations found", (text or "")[:200])
    p_levels = sorted(places) or sorted({p for p, _ in combos})
    c_levels = sorted(kinds) or sorted({c for _, c in combos})
    missing = [(p, c) for p in p_levels for c in c_levels if (p, c) not in combos]
    if missing:
        raise AnswerParseError(f"missing combinations {missing}", (text or "")[:200])
    return [combos[p, c] for p in p_levels for c in c_levels]


def format_abstractions(places: list[str], changes: list[str], grid: list[list[str]]) -> str:
    lines = [f"There are {len(places)} levels of details on where the change happened:"]
    lines += [f"p{i}. {t}" for i, t in enumerate(places, 1)]
    lines.append(f"Meanwhile, there are {len(changes)} levels of details on the change itself:")
    lines += [f"c{j}. {t}" for j, t in enumerate(changes, 1)]
    lines += ["", "Answer:"]
    for i, row in enumerate(grid, 1):
        lines += [f"(p{i} + c{j}) {t}" for j, t in enumerate(row, 1)]
    return "\n".join(lines)


def parse_unusual(text: str) -> list[str]:
    found = []
    for raw in (text or "").splitlines():
        m = _UNUSUAL.match(_strip_bullet(raw))
        if m and m.group(1).strip():
            found.append(m.group(1).strip())
    return found
