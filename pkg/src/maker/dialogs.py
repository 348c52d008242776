"""Dialog corpus model, context assembly, and weak-supervision annotation.

Responses are annotated with the token spans that match KB attribute values;
those spans drive both the distillation targets and the attribute selector's
pseudo-labels.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParseError
from .kb import AttributeSchema, KnowledgeBase
from .text import contains_value, find_occurrences, tokenize

USER_MARKER = "[usr]"
SYSTEM_MARKER = "[sys]"


@dataclass(frozen=True)
class DialogTurn:
    user: str
    response: str
    gold_entity_ids: tuple[str, ...] | None = None
    kb_token_spans: tuple[tuple[int, int], ...] | None = None
    gold_values: tuple[str, ...] | None = None

    @property
    def user_tokens(self) -> list[str]:
        return tokenize(self.user)

    @property
    def response_tokens(self) -> list[str]:
        return tokenize(self.response)

    @property
    def kb_token_count(self) -> int:
        """Number of response tokens covered by KB spans (0 if unannotated)."""
        if not self.kb_token_spans:
            return 0
        return sum(end - start for start, end in self.kb_token_spans)


@dataclass(frozen=True)
class Dialog:
    id: str
    turns: tuple[DialogTurn, ...]
    domain: str | None = None
    condensed_entity_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class DialogContext:
    """Flattened history {U_1, R_1, ..., U_t} with speaker markers, newest kept."""

    tokens: tuple[str, ...]
    turn_index: int


@dataclass(frozen=True)
class PseudoLabelVector:
    """0/1 vector over schema attributes: does any kept value occur in the turn."""

    bits: np.ndarray = field(compare=False)

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=np.int64))

    def __eq__(self, other):
        return isinstance(other, PseudoLabelVector) and np.array_equal(self.bits, other.bits)


def build_context(dialog: Dialog, t: int, max_len: int | None = None) -> DialogContext:
    """Assemble the context for turn ``t`` (1-based): all turns up to U_t.

    Front-truncates to ``max_len`` tokens, keeping the newest turns.
    """
    if not 1 <= t <= len(dialog.turns):
        raise IndexError(f"turn index {t} out of range for dialog with {len(dialog.turns)} turns")
    tokens: list[str] = []
    for i in range(t):
        turn = dialog.turns[i]
        tokens.append(USER_MARKER)
        tokens.extend(turn.user_tokens)
        if i < t - 1:
            tokens.append(SYSTEM_MARKER)
            tokens.extend(turn.response_tokens)
    if max_len is not None and len(tokens) > max_len:
        tokens = tokens[-max_len:]
    return DialogContext(tokens=tuple(tokens), turn_index=t)


def _candidate_spans(tokens: Sequence[str], kb: KnowledgeBase) -> list[tuple[int, int]]:
    spans: set[tuple[int, int]] = set()
    for value in kb.all_values():
        spans.update(find_occurrences(tokens, value))
    return sorted(spans, key=lambda s: (-(s[1] - s[0]), s[0]))


def annotate_kb_tokens(turn: DialogTurn, kb: KnowledgeBase) -> DialogTurn:
    """Mark every maximal response span that equals some KB value.

    Longer values win on overlap; the remaining candidates are taken greedily
    left to right. Deterministic and independent of dataset annotations.
    """
    tokens = turn.response_tokens
    chosen: list[tuple[int, int]] = []
    covered = np.zeros(len(tokens), dtype=bool)
    for start, end in _candidate_spans(tokens, kb):
        if covered[start:end].any():
            continue
        covered[start:end] = True
        chosen.append((start, end))
    chosen.sort()
    return replace(turn, kb_token_spans=tuple(chosen))


def span_token_indices(spans: Sequence[tuple[int, int]] | None) -> list[int]:
    """Sorted response-token positions covered by the spans."""
    if not spans:
        return []
    out: list[int] = []
    for start, end in spans:
        out.extend(range(start, end))
    return sorted(set(out))


def _entity_pairs(entity) -> dict[str, str]:
    # Accepts a clipped entity (kept pairs only) or a raw Entity.
    kept = getattr(entity, "kept_values", None)
    if kept is not None:
        return dict(kept)
    return dict(entity.values)


def build_pseudo_labels(
    context: DialogContext,
    response_tokens: Sequence[str],
    clipped: Sequence,
    schema: AttributeSchema,
) -> PseudoLabelVector:
    """bit[j] = 1 iff some retained value for attribute j occurs in context or response."""
    bits = np.zeros(schema.size, dtype=np.int64)
    for entity in clipped:
        for name, value in _entity_pairs(entity).items():
            j = schema.index(name)
            if bits[j]:
                continue
            if contains_value(context.tokens, value) or contains_value(response_tokens, value):
                bits[j] = 1
    return PseudoLabelVector(bits=bits)


def load_dialogs(path: str | Path) -> list[Dialog]:
    """Load dialogs from a JSON list of {turns, domain, condensed_entity_ids}."""
    path = Path(path)
    with path.open() as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise ParseError(f"{path}: expected a JSON array of dialogs")
    dialogs: list[Dialog] = []
    for i, item in enumerate(raw):
        if not isinstance(item, dict) or "turns" not in item:
            raise ParseError(f"{path}: dialog {i} is not an object with 'turns'", record_index=i)
        turns = []
        for j, t in enumerate(item["turns"]):
            try:
                turns.append(
                    DialogTurn(
                        user=t["user"],
                        response=t["response"],
                        gold_entity_ids=tuple(t["gold_entity_ids"]) if t.get("gold_entity_ids") else None,
                        kb_token_spans=tuple((int(a), int(b)) for a, b in t["kb_token_spans"])
                        if t.get("kb_token_spans")
                        else None,
                        gold_values=tuple(t["gold_values"]) if t.get("gold_values") else None,
                    )
                )
            except KeyError as exc:
                raise ParseError(f"{path}: dialog {i} turn {j} missing {exc}", record_index=i) from exc
        dialogs.append(
            Dialog(
                id=str(item.get("id", i)),
                turns=tuple(turns),
                domain=item.get("domain"),
                condensed_entity_ids=tuple(str(x) for x in item.get("condensed_entity_ids", ())),
            )
        )
    return dialogs


def save_dialogs(dialogs: Sequence[Dialog], path: str | Path) -> None:
    out = []
    for d in dialogs:
        turns = []
        for t in d.turns:
            turn: dict[str, object] = {"user": t.user, "response": t.response}
            if t.gold_entity_ids:
                turn["gold_entity_ids"] = list(t.gold_entity_ids)
            if t.kb_token_spans:
                turn["kb_token_spans"] = [list(s) for s in t.kb_token_spans]
            if t.gold_values:
                turn["gold_values"] = list(t.gold_values)
            turns.append(turn)
        record: dict[str, object] = {"id": d.id, "turns": turns}
        if d.domain is not None:
            record["domain"] = d.domain
        if d.condensed_entity_ids:
            record["condensed_entity_ids"] = list(d.condensed_entity_ids)
        out.append(record)
    Path(path).write_text(json.dumps(out, indent=2) + "\n")
