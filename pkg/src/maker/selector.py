"""Dual-encoder entity selection: scoring, top-K search, index refresh,
and contrastive pre-training with distant supervision.

The exact backend is a full matrix multiply; an IVF-style approximate backend
is available as an optional drop-in for larger KBs.
"""

from __future__ import annotations

import logging
import math
import random
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dialogs import Dialog, build_context
from .errors import ConfigError, ContractError, RetrievalError
from .kb import KnowledgeBase, serialize_entity
from .models import EncoderModel, Tokenizer
from .text import find_occurrences

logger = logging.getLogger(__name__)


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - x.max()
    e = np.exp(shifted)
    return e / e.sum()


@dataclass
class EntityIndex:
    """Snapshot of entity embeddings; refresh replaces it wholesale."""

    matrix: np.ndarray
    ids: tuple[str, ...]
    staleness: int = 0

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise ContractError("index matrix rows must align with entity ids")

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class EntityScores:
    """Raw inner-product scores plus their softmax over the retained set."""

    pairs: list[tuple[str, float]]
    normalized: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.normalized is None:
            self.normalized = softmax(np.array([s for _, s in self.pairs])) if self.pairs else np.zeros(0)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.pairs]

    @property
    def raw(self) -> np.ndarray:
        return np.array([s for _, s in self.pairs], dtype=np.float64)


def score_entities(ctx_vec, index: EntityIndex) -> EntityScores:
    """Dot product of the context vector against every entity row."""
    if index.size == 0:
        raise RetrievalError("cannot score against an empty index")
    vec = np.asarray(
        ctx_vec.detach().cpu().numpy() if isinstance(ctx_vec, torch.Tensor) else ctx_vec,
        dtype=np.float32,
    )
    if vec.shape != (index.dim,):
        raise ContractError(f"context vector shape {vec.shape} != (d,) with d={index.dim}")
    scores = index.matrix @ vec
    pairs = [(eid, float(s)) for eid, s in zip(index.ids, scores)]
    return EntityScores(pairs=pairs)


def top_k(scores: EntityScores, k: int) -> EntityScores:
    """Keep the K best raw scores, ties broken by ascending entity id.

    When the KB is smaller than K all entities are returned and the softmax is
    renormalized over what exists.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    if not scores.pairs:
        raise RetrievalError("top_k over empty scores")
    ranked = sorted(scores.pairs, key=lambda p: (-p[1], p[0]))[: min(k, len(scores.pairs))]
    return EntityScores(pairs=ranked)


def encode_pooled_batch(
    encoder: EncoderModel,
    tokenizer: Tokenizer,
    id_lists: Sequence[Sequence[int]],
) -> torch.Tensor:
    """Batched CLS pooling over variable-length id lists (CLS already present)."""
    if not id_lists:
        return torch.zeros((0, encoder.cfg.dim))
    max_len = max(len(ids) for ids in id_lists)
    batch = torch.full((len(id_lists), max_len), tokenizer.pad_id, dtype=torch.long)
    mask = torch.zeros((len(id_lists), max_len), dtype=torch.bool)
    for row, ids in enumerate(id_lists):
        batch[row, : len(ids)] = torch.as_tensor(ids, dtype=torch.long)
        mask[row, : len(ids)] = True
    hidden = encoder(batch, mask)
    return hidden[:, 0]


def entity_input_ids(
    kb: KnowledgeBase, tokenizer: Tokenizer, max_len: int = 128
) -> list[list[int]]:
    """CLS-prefixed token ids of every serialized entity, schema order."""
    out = []
    for entity in kb.entities:
        ids = tokenizer.encode(serialize_entity(entity, kb.schema), max_len=max_len - 1)
        out.append([tokenizer.cls_id] + ids)
    return out


def refresh_index(
    kb: KnowledgeBase,
    entity_encoder: EncoderModel,
    tokenizer: Tokenizer,
    max_len: int = 128,
    batch_size: int = 64,
) -> EntityIndex:
    """Re-encode every entity; returns a fresh snapshot with staleness 0."""
    id_lists = entity_input_ids(kb, tokenizer, max_len)
    rows = []
    was_training = entity_encoder.training
    entity_encoder.eval()
    with torch.no_grad():
        for start in range(0, len(id_lists), batch_size):
            chunk = id_lists[start : start + batch_size]
            rows.append(encode_pooled_batch(entity_encoder, tokenizer, chunk))
    if was_training:
        entity_encoder.train()
    matrix = (
        torch.cat(rows).cpu().numpy()
        if rows
        else np.zeros((0, entity_encoder.cfg.dim), dtype=np.float32)
    )
    return EntityIndex(matrix=matrix, ids=tuple(e.id for e in kb.entities), staleness=0)


def save_index(index: EntityIndex, path: str | Path) -> None:
    np.savez(
        str(path),
        ids=np.array(index.ids, dtype=object),
        matrix=index.matrix,
        d=np.int64(index.dim),
        b=np.int64(index.size),
    )


def load_index(path: str | Path) -> EntityIndex:
    data = np.load(str(path), allow_pickle=True)
    return EntityIndex(matrix=data["matrix"], ids=tuple(str(x) for x in data["ids"]))


class ApproxIvfIndex:
    """Coarse-quantized MIPS: probe the cells whose centroids score highest.

    Optional drop-in for the exact backend; must agree with it on nearly all
    top-1 results to be worth using.
    """

    def __init__(self, index: EntityIndex, n_cells: int | None = None, n_probe: int = 8, seed: int = 0):
        self.index = index
        b = index.size
        if b == 0:
            raise RetrievalError("cannot build an approximate index over an empty KB")
        self.n_cells = n_cells or max(1, int(math.sqrt(b)))
        self.n_probe = min(n_probe, self.n_cells)
        self.centroids, self.assignments = self._kmeans(index.matrix, self.n_cells, seed)

    @staticmethod
    def _kmeans(matrix: np.ndarray, n_cells: int, seed: int, iters: int = 15):
        rng = np.random.default_rng(seed)
        n = matrix.shape[0]
        centroids = matrix[rng.choice(n, size=min(n_cells, n), replace=False)].astype(np.float64)
        assignments = np.zeros(n, dtype=np.int64)
        for _ in range(iters):
            dists = ((matrix[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            assignments = dists.argmin(axis=1)
            for c in range(centroids.shape[0]):
                members = matrix[assignments == c]
                if len(members):
                    centroids[c] = members.mean(axis=0)
        return centroids, assignments

    def search(self, ctx_vec, k: int) -> EntityScores:
        vec = np.asarray(
            ctx_vec.detach().cpu().numpy() if isinstance(ctx_vec, torch.Tensor) else ctx_vec,
            dtype=np.float64,
        )
        cell_scores = self.centroids @ vec
        probe = np.argsort(-cell_scores)[: self.n_probe]
        member_rows = np.flatnonzero(np.isin(self.assignments, probe))
        if member_rows.size == 0:
            member_rows = np.arange(self.index.size)
        scores = self.index.matrix[member_rows] @ vec.astype(np.float32)
        pairs = [(self.index.ids[int(r)], float(s)) for r, s in zip(member_rows, scores)]
        return top_k(EntityScores(pairs=pairs), k)


def count_value_occurrences(entity, context_tokens: Sequence[str], response_tokens: Sequence[str]) -> int:
    total = 0
    for value in entity.values.values():
        total += len(find_occurrences(context_tokens, value))
        total += len(find_occurrences(response_tokens, value))
    return total


def distant_supervision_label(
    kb: KnowledgeBase, context_tokens: Sequence[str], response_tokens: Sequence[str]
) -> str:
    """Entity whose attribute values occur most often in context + response.

    Ties go to the lowest entity id; exhaustive by construction.
    """
    if kb.size == 0:
        raise RetrievalError("cannot label against an empty KB")
    best_id, best_count = None, -1
    for entity in sorted(kb.entities, key=lambda e: e.id):
        count = count_value_occurrences(entity, context_tokens, response_tokens)
        if count > best_count:
            best_id, best_count = entity.id, count
    return best_id


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    temperature: float = 0.05
    max_length: int = 128
    seed: int = 0


def build_pretrain_examples(
    kb: KnowledgeBase, dialogs: Sequence[Dialog], max_context_len: int = 128
) -> list[tuple[tuple[str, ...], str]]:
    """(context tokens, distant label id) pairs for every turn."""
    examples = []
    for dialog in dialogs:
        for t in range(1, len(dialog.turns) + 1):
            full_ctx = build_context(dialog, t)
            label = distant_supervision_label(kb, full_ctx.tokens, dialog.turns[t - 1].response_tokens)
            ctx = build_context(dialog, t, max_len=max_context_len)
            examples.append((ctx.tokens, label))
    return examples


def pretrain_contrastive(
    encoder: EncoderModel,
    tokenizer: Tokenizer,
    kb: KnowledgeBase,
    examples: Sequence[tuple[Sequence[str], str]],
    config: PretrainConfig,
) -> EncoderModel:
    """InfoNCE over (context, labeled entity) pairs with in-batch negatives.

    Cosine similarities divided by the temperature; both sides run through the
    shared encoder so entity and context spaces co-train.
    """
    if config.batch_size < 2:
        raise ConfigError("contrastive pre-training needs batch_size >= 2")
    if not examples:
        raise ConfigError("no pre-training examples supplied")

    entity_ids_by_key = {
        e.id: [tokenizer.cls_id]
        + tokenizer.encode(serialize_entity(e, kb.schema), max_len=config.max_length - 1)
        for e in kb.entities
    }
    ctx_cache = [
        [tokenizer.cls_id] + tokenizer.encode(list(ctx), max_len=config.max_length - 1, keep="back")
        for ctx, _ in examples
    ]
    labels = [label for _, label in examples]

    optimizer = torch.optim.AdamW(
        encoder.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    order_rng = random.Random(config.seed)
    n_batches_per_epoch = max(1, len(examples) // config.batch_size)
    total_steps = max(1, config.epochs * n_batches_per_epoch)
    step = 0
    encoder.train()
    for epoch in range(config.epochs):
        order = list(range(len(examples)))
        order_rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            if len(batch) < 2:
                continue
            for group in optimizer.param_groups:
                group["lr"] = config.learning_rate * max(0.0, 1.0 - step / total_steps)
            q = encode_pooled_batch(encoder, tokenizer, [ctx_cache[i] for i in batch])
            p = encode_pooled_batch(encoder, tokenizer, [entity_ids_by_key[labels[i]] for i in batch])
            q = torch.nn.functional.normalize(q, dim=-1)
            p = torch.nn.functional.normalize(p, dim=-1)
            logits = (q @ p.t()) / config.temperature
            loss = torch.nn.functional.cross_entropy(
                logits, torch.arange(len(batch), dtype=torch.long)
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
        logger.debug("pretrain epoch %d done (%d steps)", epoch, step)
    encoder.eval()
    return encoder
