"""Text normalization and word-level tokenization used everywhere.

One normalizer is shared by annotation, pseudo-labels, and metrics so that
attribute-selector supervision and Entity F1 agree on what counts as a match.
"""

from __future__ import annotations

import re
from collections.abc import Sequence

_WORD_RE = re.compile(r"[a-z0-9][a-z0-9\-_'@\.]*|[^\sa-z0-9]")
_WS_RE = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Lowercase and collapse internal whitespace."""
    return _WS_RE.sub(" ", text.strip().lower())


def normalize_value(value: str) -> str:
    """Metric-time form of a KB value: lowercased, whitespace joined by underscores."""
    return "_".join(normalize_text(value).split())


def tokenize(text: str) -> list[str]:
    """Split normalized text into word tokens; punctuation becomes its own token."""
    return _WORD_RE.findall(normalize_text(text))


def value_tokens(value: str) -> tuple[str, ...]:
    """Token form of a KB value, the unit used for span matching."""
    return tuple(tokenize(value))


def find_occurrences(tokens: Sequence[str], value: str) -> list[tuple[int, int]]:
    """All [start, end) token windows in ``tokens`` equal to the value's tokens.

    Matching is word-boundary exact after normalization: "south" does not
    match inside "southern".
    """
    needle = value_tokens(value)
    n = len(needle)
    if n == 0:
        return []
    lowered = [t.lower() for t in tokens]
    return [
        (i, i + n)
        for i in range(len(lowered) - n + 1)
        if tuple(lowered[i : i + n]) == needle
    ]


def contains_value(tokens: Sequence[str], value: str) -> bool:
    """Whether the value occurs (word-boundary, normalized) in the token sequence."""
    return bool(find_occurrences(tokens, value))
