"""Heuristic screening of generated clinical summaries."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence


class QAFlag(str, Enum):
    OK = "OK"
    EMPTY_OR_TRUNCATED = "EMPTY_OR_TRUNCATED"
    OVERLONG = "OVERLONG"
    PROMPT_LEAK = "PROMPT_LEAK"


DEFAULT_LEAK_PATTERNS: tuple[str, ...] = (
    r"as an ai",
    r"language model",
    r"\bi cannot\b",
    r"\bi can't\b",
    r"here is (?:a|the) summary",
    r"\binstructions?\s*:",
    r"\bprompt\b",
    r"\bsystem\s*:",
    r"\bassistant\s*:",
)
TERMINAL = (".", "!", "?")


@dataclass(frozen=True)
class QAConfig:
    max_chars: int = 1200
    min_chars: int = 40
    leak_patterns: Sequence[str] = field(default=DEFAULT_LEAK_PATTERNS)


@dataclass(frozen=True)
class QAReport:
    flag: QAFlag
    detail: str

    def to_dict(self) -> dict:
        return {"flag": self.flag.value, "detail": self.detail}


def qa_screen(text: str, cfg: QAConfig = QAConfig()) -> QAReport:
    """Exactly one flag per text; EMPTY beats PROMPT_LEAK beats OVERLONG."""
    body = (text or "").strip()
    if not body:
        return QAReport(QAFlag.EMPTY_OR_TRUNCATED, "empty")
    if len(body) < cfg.min_chars:
        return QAReport(QAFlag.EMPTY_OR_TRUNCATED, f"shorter than {cfg.min_chars} chars")
    if not body.endswith(TERMINAL):
        return QAReport(QAFlag.EMPTY_OR_TRUNCATED, "no terminal punctuation")
    for pat in cfg.leak_patterns:
        if re.search(pat, body, flags=re.IGNORECASE):
            return QAReport(QAFlag.PROMPT_LEAK, f"matched {pat!r}")
    if len(body) > cfg.max_chars:
        return QAReport(QAFlag.OVERLONG, f"longer than {cfg.max_chars} chars")
    return QAReport(QAFlag.OK, "passed")
