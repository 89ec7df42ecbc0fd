"""Compact GLM-style transformer with two-channel positions and explicit attention masks.

One packed sequence holds ``[source | masked text | <sop> piece_1 | <sop> piece_2 ...]``.
Source rows see only the source, so detection logits never depend on the
masked text or the pieces; the masked text sees source and itself; each
piece sees everything before it plus its own prefix.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import EOP_ID, N_RESERVED, PAD_ID, SOP_ID, Vocab
from .template import MaskedText, TextPiece

IGNORE = -100


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    label_count: int = 3
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_positions: int = 96
    max_block_positions: int = 16
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff, self.vocab_size) <= 0:
            raise ModelError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if self.label_count not in (2, 3, 4):
            raise ModelError("label_count must be 2, 3 or 4")
        if not 0 <= self.dropout < 1:
            raise ModelError("dropout must lie in [0, 1)")


@dataclass
class PackedInput:
    ids: np.ndarray
    positions: np.ndarray
    blocks: np.ndarray
    attention: np.ndarray  # [row, col] -> row may attend to col
    source_len: int
    masked_range: tuple[int, int]
    piece_ranges: tuple[tuple[int, int], ...] = ()
    slot_positions: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def piece_rows(self) -> np.ndarray:
        return np.concatenate(
            [np.arange(a, b) for a, b in self.piece_ranges] or [np.zeros(0, dtype=np.int64)]
        ).astype(np.int64)


def build_attention_mask(source_len: int, masked_len: int, piece_lengths: Sequence[int] = ()) -> np.ndarray:
    total = source_len + masked_len + sum(piece_lengths)
    mask = np.zeros((total, total), dtype=bool)
    s, m = source_len, source_len + masked_len
    mask[:s, :s] = True
    mask[s:m, :m] = True
    start = m
    for length in piece_lengths:
        end = start + length
        mask[start:end, :start] = True
        mask[start:end, start:end] = np.tril(np.ones((length, length), dtype=bool))
        start = end
    return mask


def pack_input(
    source: Sequence[int],
    masked: MaskedText | None = None,
    pieces: Sequence[TextPiece] = (),
    *,
    max_positions: int | None = None,
    max_block_positions: int | None = None,
) -> PackedInput:
    """Pack a sentence for the model.

    ``pieces`` are teacher-forced inputs (each prefixed with ``<sop>``); fewer
    pieces than slots is fine while decoding. Source tokens take position ids
    1..n, masked-text tokens n+1..n+m; piece tokens reuse their MASK's
    position id and count 1.. through the block channel.
    """
    n = len(source)
    masked_ids = tuple(masked.ids) if masked is not None else ()
    slots = masked.slots if masked is not None else ()
    if len(pieces) > len(slots):
        raise ModelError("more pieces than mask slots")
    m = len(masked_ids)
    slot_positions = tuple(n + 1 + s.position for s in slots)

    ids = [*source, *masked_ids]
    positions = list(range(1, n + m + 1))
    blocks = [0] * (n + m)
    piece_ranges = []
    for k, piece in enumerate(pieces):
        if piece.slot_index != k:
            raise ModelError("pieces must be ordered by slot")
        tokens = (SOP_ID, *piece.ids)
        piece_ranges.append((len(ids), len(ids) + len(tokens)))
        ids.extend(tokens)
        positions.extend([slot_positions[k]] * len(tokens))
        blocks.extend(range(1, len(tokens) + 1))
    if max_positions is not None and len(ids) > max_positions:
        raise ModelError(f"sequence too long ({len(ids)} > {max_positions})")
    if max_block_positions is not None and blocks and max(blocks) > max_block_positions:
        raise ModelError("text piece longer than the block-position table")
    attention = build_attention_mask(n, m, [b - a for a, b in piece_ranges])
    return PackedInput(
        ids=np.asarray(ids, dtype=np.int64),
        positions=np.asarray(positions, dtype=np.int64),
        blocks=np.asarray(blocks, dtype=np.int64),
        attention=attention,
        source_len=n,
        masked_range=(n, n + m),
        piece_ranges=tuple(piece_ranges),
        slot_positions=slot_positions,
    )


@dataclass
class Batch:
    ids: torch.Tensor
    positions: torch.Tensor
    blocks: torch.Tensor
    attention: torch.Tensor
    det_mask: torch.Tensor  # rows that carry detection logits (source tokens)
    det_targets: torch.Tensor | None = None  # one label per True in det_mask
    lm_targets: torch.Tensor | None = None  # (B, T), IGNORE off piece rows
    lm_mask: torch.Tensor | None = None  # piece rows
    extra: dict = field(default_factory=dict)


def collate(
    packs: Sequence[PackedInput],
    det_targets: Sequence[Sequence[int]] | None = None,
    lm_targets: Sequence[np.ndarray] | None = None,
) -> Batch:
    """Right-pad packed inputs; padding rows attend only to themselves."""
    B = len(packs)
    T = max(len(p) for p in packs)
    ids = np.full((B, T), PAD_ID, dtype=np.int64)
    pos = np.zeros((B, T), dtype=np.int64)
    blk = np.zeros((B, T), dtype=np.int64)
    att = np.zeros((B, T, T), dtype=bool)
    det_mask = np.zeros((B, T), dtype=bool)
    lm_mask = np.zeros((B, T), dtype=bool)
    for b, p in enumerate(packs):
        L = len(p)
        ids[b, :L] = p.ids
        pos[b, :L] = p.positions
        blk[b, :L] = p.blocks
        att[b, :L, :L] = p.attention
        idx = np.arange(L, T)
        att[b, idx, idx] = True
        det_mask[b, : p.source_len] = True
        lm_mask[b, p.piece_rows] = True
    batch = Batch(
        ids=torch.from_numpy(ids),
        positions=torch.from_numpy(pos),
        blocks=torch.from_numpy(blk),
        attention=torch.from_numpy(att),
        det_mask=torch.from_numpy(det_mask),
        lm_mask=torch.from_numpy(lm_mask),
    )
    if det_targets is not None:
        batch.det_targets = torch.tensor([int(l) for labels in det_targets for l in labels], dtype=torch.long)
    if lm_targets is not None:
        tgt = np.full((B, T), IGNORE, dtype=np.int64)
        for b, row in enumerate(lm_targets):
            tgt[b, : len(row)] = row
        batch.lm_targets = torch.from_numpy(tgt)
    return batch


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        hd = D // self.n_heads
        q, k, v = self.qkv(x).view(B, T, 3, self.n_heads, hd).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        weights = self.drop(torch.softmax(scores, dim=-1))
        y = (weights @ v).transpose(1, 2).reshape(B, T, D)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff_in = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff_out = nn.Linear(cfg.d_ff, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.ln1(x), allowed))
        return x + self.drop(self.ff_out(F.gelu(self.ff_in(self.ln2(x)))))


class GLMModel(nn.Module):
    """Shared encoder with a detection head and an embedding-tied LM head."""

    def __init__(self, cfg: ModelConfig, mode: str = "joint", label_set: str = "KEI"):
        super().__init__()
        if len(label_set) != cfg.label_count:
            raise ModelError(f"label set {label_set} needs label_count={len(label_set)}")
        self.config = cfg
        self.mode = mode
        self.label_set = label_set
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_positions + 1, cfg.d_model)
        self.block_emb = nn.Embedding(cfg.max_block_positions + 1, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.det_hidden = nn.Linear(cfg.d_model, cfg.d_model)
        self.det_out = nn.Linear(cfg.d_model, cfg.label_count)
        self._init_weights()

    def _init_weights(self) -> None:
        resid_std = 0.02 / math.sqrt(2 * self.config.n_layers)
        for name, p in self.named_parameters():
            if p.dim() < 2:
                if name.endswith("bias"):
                    nn.init.zeros_(p)
                continue
            std = resid_std if name.endswith(("attn.out.weight", "ff_out.weight")) else 0.02
            nn.init.normal_(p, 0.0, std)
        # the tied output layer needs token vectors of unit-ish norm to produce usable logits early
        nn.init.normal_(self.tok_emb.weight, 0.0, self.config.d_model ** -0.5)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def encode(self, batch: Batch) -> torch.Tensor:
        x = self.tok_emb(batch.ids) + self.pos_emb(batch.positions) + self.block_emb(batch.blocks)
        x = self.drop(x)
        for block in self.blocks:
            x = block(x, batch.attention)
        h = self.ln_f(x)
        if not torch.isfinite(h).all():
            raise FloatingPointError("numerical overflow")
        return h

    def detection_head(self, h: torch.Tensor) -> torch.Tensor:
        return self.det_out(F.gelu(self.det_hidden(h)))

    def lm_head(self, h: torch.Tensor) -> torch.Tensor:
        return h @ self.tok_emb.weight.T

    def forward(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        """Detection logits on source rows and LM logits on piece rows, flattened over the batch."""
        h = self.encode(batch)
        det = self.detection_head(h[batch.det_mask])
        lm = self.lm_head(h[batch.lm_mask]) if batch.lm_mask is not None else h.new_zeros(0, self.config.vocab_size)
        return det, lm

    # single-sentence helpers used by inference

    @torch.no_grad()
    def detection_probs(self, source: Sequence[int]) -> np.ndarray:
        pack = pack_input(source, max_positions=self.config.max_positions)
        was_training = self.training
        self.eval()
        det, _ = self(collate([pack]))
        self.train(was_training)
        return torch.softmax(det.double(), dim=-1).numpy()

    @torch.no_grad()
    def next_token_logprobs(
        self,
        source: Sequence[int],
        masked: MaskedText,
        committed: Sequence[TextPiece],
        prefixes: Sequence[Sequence[int]],
    ) -> np.ndarray:
        """Log-probabilities of the next token of slot ``len(committed)``, one row per prefix.

        Reserved tokens other than ``<|endofpiece|>`` are excluded from the support.
        """
        slot = len(committed)
        packs = [
            pack_input(
                source,
                masked,
                [*committed, TextPiece(tuple(prefix), slot)],
                max_positions=self.config.max_positions,
                max_block_positions=self.config.max_block_positions,
            )
            for prefix in prefixes
        ]
        was_training = self.training
        self.eval()
        batch = collate(packs)
        h = self.encode(batch)
        last = torch.tensor([p.piece_ranges[-1][1] - 1 for p in packs])
        logits = self.lm_head(h[torch.arange(len(packs)), last]).double()
        self.train(was_training)
        banned = torch.zeros(self.config.vocab_size, dtype=torch.bool)
        banned[:N_RESERVED] = True
        banned[EOP_ID] = False
        logits = logits.masked_fill(banned, float("-inf"))
        return torch.log_softmax(logits, dim=-1).numpy()


def forward(model: GLMModel, packed: PackedInput) -> tuple[torch.Tensor, torch.Tensor]:
    """``(detection_logits[n_source, L], lm_logits[n_piece_rows, V])`` for one packed input."""
    return model(collate([packed]))


# checkpoints -----------------------------------------------------------------


def save_checkpoint(path: str | Path, model: GLMModel, vocab: Vocab, **meta) -> None:
    """JSON header (names, shapes, byte offsets) followed by little-endian float32 data."""
    from safetensors.numpy import save_file

    tensors = {k: v.detach().cpu().float().numpy() for k, v in model.state_dict().items()}
    metadata = {
        "model_config": json.dumps(asdict(model.config)),
        "mode": model.mode,
        "label_set": model.label_set,
        "vocab": json.dumps(list(vocab.tokens)),
        **{k: json.dumps(v) for k, v in meta.items()},
    }
    save_file(tensors, str(path), metadata=metadata)


def load_checkpoint(path: str | Path) -> tuple[GLMModel, Vocab, dict]:
    from safetensors import safe_open

    try:
        with safe_open(str(path), framework="np") as fh:
            metadata = fh.metadata() or {}
            tensors = {k: fh.get_tensor(k) for k in fh.keys()}
    except Exception as exc:  # safetensors raises its own error types
        raise ModelError(f"cannot read checkpoint {path}: {exc}") from exc
    if "model_config" not in metadata:
        raise ModelError(f"{path} is not a model checkpoint")
    cfg = ModelConfig(**json.loads(metadata["model_config"]))
    model = GLMModel(cfg, mode=metadata.get("mode", "joint"), label_set=metadata.get("label_set", "KEI"))
    expected = model.state_dict()
    if set(expected) != set(tensors):
        raise ModelError("checkpoint tensors do not match the model configuration")
    for name, arr in tensors.items():
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise ModelError(f"shape mismatch for {name}: {arr.shape} vs {tuple(expected[name].shape)}")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in tensors.items()})
    vocab = Vocab(tuple(json.loads(metadata["vocab"])))
    extra = {
        k: json.loads(v)
        for k, v in metadata.items()
        if k not in ("model_config", "mode", "label_set", "vocab")
    }
    model.eval()
    return model, vocab, extra
