"""Minimal trainable transformer stack behind the encoder/decoder roles.

One encoder class serves all four roles (context, entity, attribute,
generator-encoder); the decoder exposes per-layer, head-averaged
cross-attention so retrieval supervision can be distilled from it. A
pre-trained backend can replace this one as long as it honors the same
pooling, shape, and attention-exposure contracts.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ContractError, GradCheckError

PAD, UNK, CLS, SEP, EOS, USR, SYS = "[pad]", "[unk]", "[cls]", "[sep]", "[eos]", "[usr]", "[sys]"
SPECIALS = (PAD, UNK, CLS, SEP, EOS, USR, SYS)


class Tokenizer:
    """Word-level vocabulary with the special tokens encoders rely on."""

    def __init__(self, tokens: Iterable[str]):
        extras = [t for t in dict.fromkeys(tokens) if t not in SPECIALS]
        self.itos: list[str] = list(SPECIALS) + extras
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, token_sources: Iterable[Sequence[str] | str]) -> "Tokenizer":
        from .text import tokenize

        seen: set[str] = set()
        for source in token_sources:
            seen.update(tokenize(source) if isinstance(source, str) else source)
        return cls(sorted(seen))

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    @property
    def cls_id(self) -> int:
        return self.stoi[CLS]

    @property
    def sep_id(self) -> int:
        return self.stoi[SEP]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    def encode(
        self,
        text: str | Sequence[str],
        add_cls: bool = False,
        add_eos: bool = False,
        max_len: int | None = None,
        keep: str = "front",
    ) -> list[int]:
        from .text import tokenize

        tokens = tokenize(text) if isinstance(text, str) else list(text)
        if max_len is not None and len(tokens) > max_len:
            tokens = tokens[:max_len] if keep == "front" else tokens[-max_len:]
        ids = [self.stoi.get(t, self.unk_id) for t in tokens]
        if add_cls:
            ids = [self.cls_id] + ids
        if add_eos:
            ids = ids + [self.eos_id]
        return ids

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        tokens = [self.itos[i] for i in ids]
        if skip_special:
            tokens = [t for t in tokens if t not in SPECIALS]
        return " ".join(tokens)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    max_positions: int = 640
    dropout: float = 0.0

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ContractError("dim must be divisible by n_heads")


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        key_mask: Tensor | None = None,
        causal: bool = False,
    ) -> tuple[Tensor, Tensor]:
        """Returns (output (b,q,d), attention weights (b,H,q,k) post-softmax)."""
        b, q_len, _ = query.shape
        k_len = key.shape[1]
        heads = self.n_heads

        def split(x: Tensor) -> Tensor:
            return x.view(b, -1, heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(query))
        k = split(self.k_proj(key))
        v = split(self.v_proj(value))
        scores = torch.einsum("bhqd,bhkd->bhqk", q, k) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            causal_mask = torch.ones(q_len, k_len, dtype=torch.bool, device=query.device).triu(1)
            scores = scores.masked_fill(causal_mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = self.dropout(attn)
        out = torch.einsum("bhqk,bhkd->bhqd", attn, v)
        out = out.transpose(1, 2).reshape(b, q_len, -1)
        return self.out_proj(out), attn


class _FeedForward(nn.Module):
    def __init__(self, dim: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ffn_dim, dim)
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class _EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.dim, cfg.n_heads, cfg.dropout)
        self.ffn = _FeedForward(cfg.dim, cfg.ffn_dim, cfg.dropout)
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.ln2 = nn.LayerNorm(cfg.dim)

    def forward(self, x: Tensor, mask: Tensor | None) -> Tensor:
        h = self.ln1(x)
        attn_out, _ = self.attn(h, h, h, key_mask=mask)
        x = x + attn_out
        x = x + self.ffn(self.ln2(x))
        return x


class EncoderModel(nn.Module):
    """Bidirectional encoder; position 0 is expected to hold the CLS token."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.pos_emb = nn.Embedding(cfg.max_positions, cfg.dim)
        self.blocks = nn.ModuleList(_EncoderBlock(cfg) for _ in range(cfg.enc_layers))
        self.final_ln = nn.LayerNorm(cfg.dim)

    def forward(self, ids: Tensor, mask: Tensor | None = None) -> Tensor:
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if ids.shape[1] > self.cfg.max_positions:
            raise ContractError(
                f"sequence length {ids.shape[1]} exceeds max_positions {self.cfg.max_positions}"
            )
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.token_emb(ids) + self.pos_emb(positions)[None, :, :]
        for block in self.blocks:
            x = block(x, mask)
        return self.final_ln(x)


class _DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.dim, cfg.n_heads, cfg.dropout)
        self.cross_attn = MultiHeadAttention(cfg.dim, cfg.n_heads, cfg.dropout)
        self.ffn = _FeedForward(cfg.dim, cfg.ffn_dim, cfg.dropout)
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.ln3 = nn.LayerNorm(cfg.dim)

    def forward(
        self, x: Tensor, tgt_mask: Tensor | None, memory: Tensor, mem_mask: Tensor | None
    ) -> tuple[Tensor, Tensor]:
        h = self.ln1(x)
        self_out, _ = self.self_attn(h, h, h, key_mask=tgt_mask, causal=True)
        x = x + self_out
        h = self.ln2(x)
        cross_out, cross_weights = self.cross_attn(h, memory, memory, key_mask=mem_mask)
        x = x + cross_out
        x = x + self.ffn(self.ln3(x))
        return x, cross_weights


class DecoderModel(nn.Module):
    """Causal decoder with cross-attention over a fused source memory.

    The output projection is tied to the input embedding. ``forward`` returns
    the per-layer post-softmax cross-attention weights (batch, heads, target,
    source) alongside the logits.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.pos_emb = nn.Embedding(cfg.max_positions, cfg.dim)
        self.blocks = nn.ModuleList(_DecoderBlock(cfg) for _ in range(cfg.dec_layers))
        self.final_ln = nn.LayerNorm(cfg.dim)

    @property
    def n_layers(self) -> int:
        return self.cfg.dec_layers

    def forward(
        self,
        ids: Tensor,
        memory: Tensor,
        mem_mask: Tensor | None = None,
        tgt_mask: Tensor | None = None,
    ) -> tuple[Tensor, list[Tensor]]:
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if memory.dim() == 2:
            memory = memory.unsqueeze(0)
        positions = torch.arange(ids.shape[1], device=ids.device)
        x = self.token_emb(ids) + self.pos_emb(positions)[None, :, :]
        cross_layers: list[Tensor] = []
        for block in self.blocks:
            x, cross = block(x, tgt_mask, memory, mem_mask)
            cross_layers.append(cross)
        x = self.final_ln(x)
        logits = x @ self.token_emb.weight.t()
        return logits, cross_layers


@dataclass(frozen=True)
class CrossAttentionRecord:
    """Head-averaged attention from KB-related target steps to one entity's tokens.

    ``tensor`` has shape (entity tokens, KB-related steps, decoder layers).
    """

    entity_index: int
    tensor: Tensor = field(compare=False)


def encode_pooled(
    model: EncoderModel,
    ids: Sequence[int] | Tensor,
    cls_id: int | None = None,
    truncate: str | None = "back",
) -> Tensor:
    """Run the encoder and return the CLS position's final hidden state.

    Prepends the CLS id when the sequence does not already start with it.
    Over-length input is truncated per ``truncate`` ("back" keeps the front,
    "front" keeps the tail); pass None to make over-length a contract error.
    """
    id_list = ids.tolist() if isinstance(ids, Tensor) else list(ids)
    if cls_id is not None and (not id_list or id_list[0] != cls_id):
        id_list = [cls_id] + id_list
    limit = model.cfg.max_positions
    if len(id_list) > limit:
        if truncate == "back":
            id_list = id_list[:limit]
        elif truncate == "front":
            id_list = [id_list[0]] + id_list[-(limit - 1) :]
        else:
            raise ContractError(f"input length {len(id_list)} exceeds {limit} and truncation is forbidden")
    tensor = torch.tensor(id_list, dtype=torch.long).unsqueeze(0)
    hidden = model(tensor)
    return hidden[0, 0]


def decode_with_attention(
    dec: DecoderModel,
    memory: Tensor,
    segment_map: Sequence[int],
    target_ids: Sequence[int] | Tensor,
    kb_steps: Sequence[int] = (),
    start_id: int | None = None,
) -> tuple[Tensor, list[CrossAttentionRecord]]:
    """Teacher-forced decode returning stepwise log-probs and per-entity records.

    ``segment_map[s]`` gives the entity index owning source position s, or -1
    for context positions. ``kb_steps`` are the target positions that count as
    KB-related. Head-averaged, all layers kept.
    """
    if memory.dim() == 3:
        memory = memory.squeeze(0)
    if memory.shape[0] != len(segment_map):
        raise ContractError(
            f"segment_map length {len(segment_map)} != memory length {memory.shape[0]}"
        )
    target = torch.as_tensor(target_ids, dtype=torch.long)
    if start_id is None:
        raise ContractError("start_id is required for teacher forcing")
    dec_in = torch.cat([torch.tensor([start_id]), target[:-1]])
    logits, cross_layers = dec(dec_in.unsqueeze(0), memory.unsqueeze(0))
    log_probs = torch.log_softmax(logits[0], dim=-1)

    seg = np.asarray(segment_map)
    steps = list(kb_steps)
    n_entities = int(seg.max()) + 1 if seg.size and seg.max() >= 0 else 0
    # (L, T, S) head-averaged stack shared by every record.
    averaged = torch.stack([layer[0].mean(dim=0) for layer in cross_layers])
    records: list[CrossAttentionRecord] = []
    for i in range(n_entities):
        positions = np.flatnonzero(seg == i)
        if len(positions) and steps:
            block = averaged[:, steps, :][:, :, positions]  # (L, M, |E_i|)
            tensor = block.permute(2, 1, 0)  # (|E_i|, M, L)
        else:
            tensor = averaged.new_zeros((len(positions), len(steps), averaged.shape[0]))
        records.append(CrossAttentionRecord(entity_index=i, tensor=tensor))
    return log_probs, records


def flat_params(*modules: nn.Module) -> Tensor:
    """Detached 1-D copy of all parameters, in named order."""
    chunks = [p.detach().reshape(-1) for m in modules for _, p in sorted(m.named_parameters())]
    if not chunks:
        return torch.zeros(0)
    return torch.cat(chunks).clone()


def functional_loss_fn(
    modules: Sequence[nn.Module],
    compute: Callable[..., Tensor],
) -> Callable[[Tensor], Tensor]:
    """Wrap a multi-module loss as a pure function of one flat parameter vector.

    ``compute`` receives one callable per module; each behaves like the module
    but runs under parameters sliced from the vector, so autograd reaches the
    vector itself.
    """
    layouts = []
    for module in modules:
        entries = [(name, p.shape, p.numel()) for name, p in sorted(module.named_parameters())]
        layouts.append(entries)

    def fn(vec: Tensor) -> Tensor:
        calls = []
        offset = 0
        for module, entries in zip(modules, layouts):
            params = {}
            for name, shape, numel in entries:
                params[name] = vec[offset : offset + numel].view(shape)
                offset += numel
            calls.append(
                lambda *a, _m=module, _p=params, **k: torch.func.functional_call(_m, _p, a, k)
            )
        if offset != vec.numel():
            raise ContractError(f"parameter vector has {vec.numel()} entries, expected {offset}")
        return compute(*calls)

    return fn


def grad_check(
    loss_fn: Callable[[Tensor], Tensor],
    params: Tensor,
    eps: float = 1e-5,
    n_samples: int = 40,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    A random coordinate subset is probed; both sides run in double precision.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = params.detach().to(torch.float64).clone().requires_grad_(True)
    loss = loss_fn(base)
    if not torch.isfinite(loss):
        raise GradCheckError(f"loss is non-finite at the evaluation point: {loss.item()}")
    analytic = torch.autograd.grad(loss, base)[0]

    rng = np.random.default_rng(seed)
    n = base.numel()
    coords = rng.choice(n, size=min(n_samples, n), replace=False)
    worst = 0.0
    with torch.no_grad():
        flat = base.detach().clone()
        for c in coords:
            c = int(c)
            orig = flat[c].item()
            flat[c] = orig + eps
            up = loss_fn(flat)
            flat[c] = orig - eps
            down = loss_fn(flat)
            flat[c] = orig
            if not (torch.isfinite(up) and torch.isfinite(down)):
                raise GradCheckError("loss became non-finite during finite differencing")
            numeric = (up.item() - down.item()) / (2 * eps)
            a = analytic[c].item()
            scale = max(abs(a), abs(numeric))
            if scale < 1e-10:
                continue
            worst = max(worst, abs(a - numeric) / scale)
    return worst


def config_fingerprint(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(
    path: str | Path,
    named_states: dict[str, dict],
    vocab: list[str],
    fingerprint: str,
    extra: dict | None = None,
) -> None:
    """One container holding parameter tensors, the vocab, and a config hash."""
    payload = {
        "states": named_states,
        "vocab": vocab,
        "fingerprint": fingerprint,
        "extra": extra or {},
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> dict:
    return torch.load(str(path), map_location="cpu", weights_only=False)
