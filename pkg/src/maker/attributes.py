"""Attribute scoring, accumulation across retrieved entities, clipping, and
the binary cross-entropy auxiliary loss."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ContractError
from .kb import AttributeSchema, Entity, serialize_entity
from .models import EncoderModel, Tokenizer
from .selector import EntityScores, encode_pooled_batch
from .text import tokenize

BCE_EPS = 1e-7


@dataclass(frozen=True)
class ClipConfig:
    strategy: Literal["threshold", "top_k_attrs", "all"] = "threshold"
    tau: float = 0.1
    top_k: int | None = None
    accumulation: Literal["weighted", "average"] = "weighted"
    normalized_weights: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ContractError("tau must lie in [0, 1)")
        if self.strategy == "top_k_attrs" and (self.top_k is None or self.top_k < 1):
            raise ContractError("top_k_attrs strategy needs top_k >= 1")


@dataclass(frozen=True)
class ClippedEntity:
    """A retrieved entity with only its selected attribute-value pairs kept."""

    entity: Entity
    kept: tuple[str, ...]
    tokens: tuple[str, ...]

    @property
    def kept_values(self) -> dict[str, str]:
        return {name: self.entity.values[name] for name in self.kept if name in self.entity.values}


@dataclass
class AttributeScores:
    per_entity: Tensor  # (K, N) raw FFN outputs
    accumulated: Tensor  # (N,) sigmoid output in (0, 1)


class AttributeFfn(nn.Module):
    """Two-layer head mapping the pooled [context; entity] vector to N scores."""

    def __init__(self, dim: int, n_attributes: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, n_attributes))

    def forward(self, pooled: Tensor) -> Tensor:
        return self.net(pooled)


def attribute_presence_mask(entities: Sequence[Entity], schema: AttributeSchema) -> torch.Tensor:
    mask = torch.zeros((len(entities), schema.size))
    for i, entity in enumerate(entities):
        for j, name in enumerate(schema.names):
            if name in entity.values:
                mask[i, j] = 1.0
    return mask


def score_attributes(
    attr_encoder: EncoderModel,
    ffn: AttributeFfn,
    tokenizer: Tokenizer,
    context_tokens: Sequence[str],
    entities: Sequence[Entity],
    schema: AttributeSchema,
    max_context_len: int = 200,
    max_kb_len: int = 100,
) -> Tensor:
    """Row i = FFN(pool([context ; entity_i])), one row per retrieved entity.

    Entities are serialized with the full schema (no mask). Scores for
    attributes an entity does not carry are zeroed so union-schema KBs never
    report importance for pairs that do not exist.
    """
    ctx_ids = tokenizer.encode(list(context_tokens), max_len=max_context_len, keep="back")
    inputs = []
    for entity in entities:
        ent_ids = tokenizer.encode(serialize_entity(entity, schema), max_len=max_kb_len)
        inputs.append([tokenizer.cls_id] + ctx_ids + [tokenizer.sep_id] + ent_ids)
    pooled = encode_pooled_batch(attr_encoder, tokenizer, inputs)
    scores = ffn(pooled)
    mask = attribute_presence_mask(entities, schema).to(scores.dtype)
    return scores * mask


def _as_weight_tensor(scores, like: Tensor) -> Tensor:
    if isinstance(scores, EntityScores):
        return torch.as_tensor(scores.raw, dtype=like.dtype)
    if isinstance(scores, Tensor):
        return scores.to(like.dtype)
    return torch.as_tensor(np.asarray(scores), dtype=like.dtype)


def accumulate(
    per_entity: Tensor,
    scores=None,
    mode: str = "weighted",
) -> Tensor:
    """Sigmoid of the selection-score-weighted sum (or plain mean) of rows.

    "weighted" uses the raw selection scores exactly as printed; "average" is
    the ablation that drops the weighting.
    """
    if per_entity.ndim != 2 or per_entity.shape[0] == 0:
        raise ContractError("per-entity scores must be a non-empty (K, N) matrix")
    if mode == "average":
        return torch.sigmoid(per_entity.mean(dim=0))
    if mode != "weighted":
        raise ContractError(f"unknown accumulation mode {mode!r}")
    if scores is None:
        raise ContractError("weighted accumulation needs entity selection scores")
    weights = _as_weight_tensor(scores, per_entity)
    if weights.shape[0] != per_entity.shape[0]:
        raise ContractError("weights and per-entity rows disagree on K")
    return torch.sigmoid(weights @ per_entity)


def clip_entities(
    entities: Sequence[Entity],
    accumulated,
    cfg: ClipConfig,
    schema: AttributeSchema,
) -> list[ClippedEntity]:
    """Apply one shared kept-attribute set to every retrieved entity.

    threshold keeps attributes with importance strictly above tau;
    top_k_attrs keeps the k largest (ties by schema order); all keeps
    everything. Each entity is re-serialized under the kept mask.
    """
    values = np.asarray(
        accumulated.detach().cpu().numpy() if isinstance(accumulated, Tensor) else accumulated,
        dtype=np.float64,
    )
    if values.shape != (schema.size,):
        raise ContractError(f"accumulated vector length {values.shape} != N={schema.size}")
    if cfg.strategy == "all":
        kept = tuple(schema.names)
    elif cfg.strategy == "threshold":
        kept = tuple(name for j, name in enumerate(schema.names) if values[j] > cfg.tau)
    else:
        order = sorted(range(schema.size), key=lambda j: (-values[j], j))[: cfg.top_k]
        kept = tuple(schema.names[j] for j in sorted(order))

    clipped = []
    for entity in entities:
        serialized = serialize_entity(entity, schema, mask=kept)
        clipped.append(ClippedEntity(entity=entity, kept=kept, tokens=tuple(tokenize(serialized))))
    return clipped


def bce_loss(accumulated: Tensor, bits) -> Tensor:
    """Mean binary cross-entropy between importances and 0/1 pseudo-labels."""
    target_bits = getattr(bits, "bits", bits)
    target = torch.as_tensor(np.asarray(target_bits), dtype=accumulated.dtype)
    if target.shape != accumulated.shape:
        raise ContractError("pseudo-label length does not match accumulated vector")
    probs = accumulated.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * probs.log() + (1.0 - target) * (1.0 - probs).log()).mean()
