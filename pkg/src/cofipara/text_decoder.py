"""Autoregressive text decoder with a text-to-image cross-attention per layer.

Every layer computes ``LM_dec(h) + CrossAttn(h, I_Q)``: a standard
pre-norm decoder layer (causal self-attention, attention over the fused
encoder memory, feed-forward) plus attention over the selected image
queries added on top.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import BoundingBox
from .errors import ContractViolation
from .fusion import FeedForward, MultiHeadAttention
from .sample import Stance
from .tokenizer import BOS, EOS, PAD


class LMDecoderLayer(nn.Module):
    def __init__(self, d_model, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.enc_attn = MultiHeadAttention(d_model, heads)
        self.norm3 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model)

    def forward(self, h, memory, memory_mask=None):
        x = self.norm1(h)
        h = h + self.self_attn(x, x, causal=True)
        h = h + self.enc_attn(self.norm2(h), memory, key_mask=memory_mask)
        return h + self.ffn(self.norm3(h))


class CrossModalDecoderLayer(nn.Module):
    def __init__(self, d_model, heads):
        super().__init__()
        self.lm = LMDecoderLayer(d_model, heads)
        self.image_attn = MultiHeadAttention(d_model, heads)

    def forward(self, h, memory, memory_mask, I_Q):
        return self.lm(h, memory, memory_mask) + self.image_attn(h, I_Q)


@dataclass
class DecoderState:
    H: torch.Tensor
    layer_index: int
    L: int
    H_attn: torch.Tensor | None = None


@dataclass
class Prediction:
    tokens: list[int]
    decoded_text: str
    boxes: list[tuple[BoundingBox, float]] = field(default_factory=list)

    def emitted(self, threshold=0.5):
        return [(b, c) for b, c in self.boxes if c >= threshold]


class TextDecoder(nn.Module):
    """Output projection is tied to the shared token embedding."""

    def __init__(self, embedding: nn.Embedding, d_model, heads, layers, max_len):
        super().__init__()
        self.embedding = embedding
        self.max_len = max_len
        self.pos = nn.Embedding(max_len, d_model)
        self.layers = nn.ModuleList(CrossModalDecoderLayer(d_model, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(d_model)

    @property
    def L(self):
        return len(self.layers)

    def embed(self, ids):
        t = ids.shape[-1]
        if t > self.max_len:
            raise ContractViolation(f"decoder input length {t} exceeds max_len {self.max_len}")
        return self.embedding(ids) + self.pos(torch.arange(t, device=ids.device))

    def decode_layer(self, state: DecoderState, I_Q, memory, memory_mask=None) -> DecoderState:
        if state.layer_index >= state.L:
            raise ContractViolation(f"layer index {state.layer_index} >= L={state.L}")
        if state.H.shape[-1] != I_Q.shape[-1]:
            raise ContractViolation(f"state dim {state.H.shape[-1]} != query dim {I_Q.shape[-1]}")
        layer = self.layers[state.layer_index]
        attn = layer.image_attn(state.H, I_Q)
        H_next = layer.lm(state.H, memory, memory_mask) + attn
        return DecoderState(H=H_next, layer_index=state.layer_index + 1, L=state.L, H_attn=attn)

    def forward(self, ids, memory, memory_mask, I_Q):
        """Teacher-forced logits for decoder input ``ids``."""
        h = self.embed(ids)
        for layer in self.layers:
            h = layer(h, memory, memory_mask, I_Q)
        return F.linear(self.norm(h), self.embedding.weight)

    @torch.no_grad()
    def generate(self, memory, memory_mask, I_Q, max_len):
        """Greedy decoding for a batch; returns one token list per row, EOS excluded."""
        if max_len < 1:
            raise ContractViolation("max_len must be >= 1")
        max_len = min(max_len, self.max_len - 1)
        b = memory.shape[0]
        ids = torch.full((b, 1), BOS, dtype=torch.long, device=memory.device)
        done = torch.zeros(b, dtype=torch.bool, device=memory.device)
        for _ in range(max_len):
            nxt = self.forward(ids, memory, memory_mask, I_Q)[:, -1].argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
            ids = torch.cat([ids, nxt[:, None]], dim=1)
            done |= nxt == EOS
            if done.all():
                break
        out = []
        for row in ids[:, 1:].tolist():
            toks = []
            for t in row:
                if t in (EOS, PAD):
                    break
                toks.append(t)
            out.append(toks)
        return out


def text_loss(logits: torch.Tensor, targets: torch.Tensor, pad_id: int = PAD) -> torch.Tensor:
    """Token cross-entropy, averaged over non-pad positions of each sequence,
    then over the batch. Accepts ``(T, V)``/``(T,)`` or ``(B, T, V)``/``(B, T)``.
    """
    if logits.dim() == 2:
        logits, targets = logits.unsqueeze(0), targets.unsqueeze(0)
    if targets.shape[-1] == 0:
        raise ContractViolation("empty target sequence")
    if logits.shape[1] < targets.shape[1]:
        raise ContractViolation(f"{logits.shape[1]} logit rows for {targets.shape[1]} targets")
    logits = logits[:, : targets.shape[1]]
    mask = targets != pad_id
    counts = mask.sum(-1)
    if (counts == 0).any():
        raise ContractViolation("a target sequence contains only padding")
    nll = F.cross_entropy(logits.transpose(1, 2), targets, reduction="none", ignore_index=pad_id)
    return ((nll * mask).sum(-1) / counts).mean()


def label_to_text(label) -> str:
    return Stance(label).value


def text_to_label(text: str):
    """Parse a generated MSD label; anything unrecognised returns None."""
    t = text.strip().lower()
    for s in (Stance.NON_SARCASTIC, Stance.SARCASTIC):
        if t == s.value:
            return s
    return None
