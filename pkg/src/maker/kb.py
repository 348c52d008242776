"""Knowledge-base data model, entity serialization, and per-dialog KB views.

A knowledge base is a flat list of entities governed by one attribute schema.
When entities from several domains are pooled, the schema is the union of the
per-domain schemas and entities simply lack the attributes that do not apply.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING

from .errors import EntityNotFoundError, ParseError, ValidationError
from .text import normalize_text

if TYPE_CHECKING:
    from .dialogs import Dialog

RESERVED_KEYS = ("id", "domain")


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attribute names; order is stable across save/load."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValidationError(f"duplicate attribute names in schema: {self.names}")

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class Entity:
    """One KB record: a stable id plus a partial attribute -> value map."""

    id: str
    values: Mapping[str, str]
    domain: str | None = None

    def validate(self, schema: AttributeSchema) -> None:
        unknown = set(self.values) - set(schema.names)
        if unknown:
            raise ValidationError(f"entity {self.id!r} has attributes outside schema: {sorted(unknown)}")
        for name, value in self.values.items():
            if not normalize_text(value):
                raise ValidationError(f"entity {self.id!r} has empty value for {name!r}")


@dataclass(frozen=True)
class KnowledgeBase:
    schema: AttributeSchema
    entities: tuple[Entity, ...]
    _by_id: dict[str, Entity] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        by_id: dict[str, Entity] = {}
        for entity in self.entities:
            if entity.id in by_id:
                raise ValidationError(f"duplicate entity id {entity.id!r}")
            entity.validate(self.schema)
            by_id[entity.id] = entity
        object.__setattr__(self, "_by_id", by_id)

    @property
    def size(self) -> int:
        return len(self.entities)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self._by_id

    def get(self, entity_id: str) -> Entity:
        try:
            return self._by_id[entity_id]
        except KeyError:
            raise EntityNotFoundError(f"entity id {entity_id!r} not in knowledge base") from None

    def all_values(self) -> list[str]:
        """Every attribute value in the KB, entity order then schema order."""
        out = []
        for entity in self.entities:
            for name in self.schema.names:
                if name in entity.values:
                    out.append(entity.values[name])
        return out


class KbMode(str, Enum):
    CONDENSED = "condensed"
    IN_DOMAIN = "in_domain"
    CROSS_DOMAIN = "cross_domain"


def _coerce_value(raw) -> str | None:
    if raw is None:
        return None
    if isinstance(raw, (list, tuple)):
        raw = " ".join(str(x) for x in raw)
    text = str(raw)
    return text if normalize_text(text) else None


def load_kb(path: str | Path) -> KnowledgeBase:
    """Load a KB from a JSON array of flat attribute->value objects.

    The schema is the union of observed attribute names in file order of
    first appearance. "id" and "domain" are reserved keys; a missing id
    defaults to the record position. Null/empty values mean "absent".
    """
    path = Path(path)
    with path.open() as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise ParseError(f"{path}: expected a JSON array of records")

    names: list[str] = []
    entities: list[Entity] = []
    seen_ids: set[str] = set()
    for i, record in enumerate(records):
        if not isinstance(record, dict):
            raise ParseError(f"{path}: record {i} is not an object", record_index=i)
        entity_id = str(record.get("id", i))
        if entity_id in seen_ids:
            raise ValidationError(f"{path}: duplicate entity id {entity_id!r} at record {i}")
        seen_ids.add(entity_id)
        domain = record.get("domain")
        values: dict[str, str] = {}
        for key, raw in record.items():
            if key in RESERVED_KEYS:
                continue
            if not isinstance(key, str):
                raise ParseError(f"{path}: record {i} has non-string key", record_index=i)
            value = _coerce_value(raw)
            if key not in names:
                names.append(key)
            if value is not None:
                values[key] = value
        entities.append(Entity(id=entity_id, values=values, domain=str(domain) if domain is not None else None))

    return KnowledgeBase(schema=AttributeSchema(tuple(names)), entities=tuple(entities))


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    """Write the KB as JSON records; absent attributes are emitted as null.

    Emitting nulls keeps the schema order recoverable on reload even when
    early records lack some attributes.
    """
    records = []
    for entity in kb.entities:
        record: dict[str, object] = {"id": entity.id}
        if entity.domain is not None:
            record["domain"] = entity.domain
        for name in kb.schema.names:
            record[name] = entity.values.get(name)
        records.append(record)
    Path(path).write_text(json.dumps(records, indent=2) + "\n")


def serialize_entity(
    entity: Entity,
    schema: AttributeSchema,
    mask: Iterable[str] | None = None,
) -> str:
    """Flatten an entity to "attr1 value1 attr2 value2 ..." in schema order.

    Absent attributes are skipped silently. When a mask is given, pairs whose
    attribute is not in the mask are omitted entirely.
    """
    keep = None if mask is None else set(mask)
    parts: list[str] = []
    for name in schema.names:
        if name not in entity.values:
            continue
        if keep is not None and name not in keep:
            continue
        parts.append(name)
        parts.append(normalize_text(entity.values[name]))
    return " ".join(parts)


def build_kb_view(global_kb: KnowledgeBase, dialog: "Dialog", mode: KbMode | str) -> KnowledgeBase:
    """Per-dialog KB view: the dialog's condensed list, its domain, or everything.

    All views keep the global (union) schema so attribute vectors stay
    comparable across modes.
    """
    mode = KbMode(mode)
    if mode is KbMode.CROSS_DOMAIN:
        return global_kb
    if mode is KbMode.CONDENSED:
        picked = tuple(global_kb.get(eid) for eid in dialog.condensed_entity_ids)
        return KnowledgeBase(schema=global_kb.schema, entities=picked)
    picked = tuple(e for e in global_kb.entities if e.domain == dialog.domain)
    return KnowledgeBase(schema=global_kb.schema, entities=picked)


def kb_stats(kb: KnowledgeBase) -> dict:
    """Summary used by the CLI: sizes, per-domain counts, fill rates."""
    domains: dict[str, int] = {}
    fill: dict[str, int] = {name: 0 for name in kb.schema.names}
    for entity in kb.entities:
        key = entity.domain or "(none)"
        domains[key] = domains.get(key, 0) + 1
        for name in entity.values:
            fill[name] += 1
    return {
        "entities": kb.size,
        "attributes": kb.schema.size,
        "schema": list(kb.schema.names),
        "domains": domains,
        "attribute_fill_counts": fill,
    }
