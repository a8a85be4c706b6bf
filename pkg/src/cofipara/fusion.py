"""Text/image encoders, bi-directional cross-attention fusion and query selection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractViolation, RejectedInput

log = logging.getLogger(__name__)


@dataclass
class AttentionWeights:
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor

    @property
    def d_k(self) -> int:
        return self.w_k.shape[-1]


def cross_attention(query_feats, kv_feats, weights: AttentionWeights, key_mask=None, return_probs=False):
    """Single-head scaled dot-product attention, softmax(QK^T / sqrt(d_k)) V.

    ``key_mask`` is boolean over keys, True for positions that may be attended.
    Leading batch dimensions broadcast.
    """
    if query_feats.shape[-1] != weights.w_q.shape[0] or kv_feats.shape[-1] != weights.w_k.shape[0]:
        raise ContractViolation(
            f"feature dims {query_feats.shape[-1]}/{kv_feats.shape[-1]} do not match "
            f"projections {tuple(weights.w_q.shape)}/{tuple(weights.w_k.shape)}"
        )
    if weights.w_q.shape[-1] != weights.w_k.shape[-1]:
        raise ContractViolation("query and key projections must share d_k")
    q = query_feats @ weights.w_q
    k = kv_feats @ weights.w_k
    v = kv_feats @ weights.w_v
    logits = q @ k.transpose(-1, -2) / math.sqrt(weights.d_k)
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask.unsqueeze(-2), float("-inf"))
    probs = torch.softmax(logits, dim=-1)
    out = probs @ v
    return (out, probs) if return_probs else out


class MultiHeadAttention(nn.Module):
    """Multi-head version of :func:`cross_attention` with an output projection.

    Value projections carry a bias, the output projection does not, so zero
    value weights and bias make the block output exactly zero.
    """

    def __init__(self, d_model, heads):
        super().__init__()
        if d_model % heads:
            raise ContractViolation(f"heads={heads} must divide d_model={d_model}")
        self.heads = heads
        self.d_k = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model, bias=False)

    def _split(self, x):
        return x.view(*x.shape[:-1], self.heads, self.d_k).transpose(-2, -3)

    def forward(self, x, memory, key_mask=None, causal=False, return_probs=False):
        if x.shape[-1] != self.q_proj.in_features or memory.shape[-1] != self.k_proj.in_features:
            raise ContractViolation(f"attention input dims {x.shape[-1]}/{memory.shape[-1]} mismatch")
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(memory))
        v = self._split(self.v_proj(memory))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_k)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[..., None, None, :], float("-inf"))
        if causal:
            t, s = logits.shape[-2:]
            future = torch.ones(t, s, dtype=torch.bool, device=x.device).triu(1)
            logits = logits.masked_fill(future, float("-inf"))
        probs = torch.softmax(logits, dim=-1)
        out = (probs @ v).transpose(-2, -3).reshape(*x.shape[:-1], -1)
        out = self.out_proj(out)
        return (out, probs) if return_probs else out


class FeedForward(nn.Module):
    def __init__(self, d_model, mult=4):
        super().__init__()
        self.fc1 = nn.Linear(d_model, mult * d_model)
        self.fc2 = nn.Linear(mult * d_model, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, d_model, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model)

    def forward(self, x, mask=None):
        h = self.norm1(x)
        x = x + self.attn(h, h, key_mask=mask)
        return x + self.ffn(self.norm2(x))


@dataclass
class TextFeatures:
    H_T: torch.Tensor  # (B, m, d) or (m, d)
    token_ids: torch.Tensor
    attention_mask: torch.Tensor


@dataclass
class ImageFeatures:
    I_E: torch.Tensor  # (B, n, d) or (n, d)
    patch_grid: tuple[int, int]


@dataclass
class FusedFeatures:
    H_T0: torch.Tensor
    I_B: torch.Tensor


@dataclass
class SelectedQueries:
    indices: torch.Tensor  # (B, n_q) or (n_q,)
    I_Q: torch.Tensor
    scores: torch.Tensor  # per-patch relevance, (B, n) or (n,)

    @property
    def n_q(self):
        return self.indices.shape[-1]


class TextEncoder(nn.Module):
    def __init__(self, embedding: nn.Embedding, d_model, heads, layers, max_tokens):
        super().__init__()
        self.embedding = embedding
        self.max_tokens = max_tokens
        self.pos = nn.Embedding(max_tokens, d_model)
        self.layers = nn.ModuleList(EncoderLayer(d_model, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(d_model)

    def forward(self, ids, mask):
        x = self.embedding(ids) + self.pos(torch.arange(ids.shape[-1], device=ids.device))
        for layer in self.layers:
            x = layer(x, mask)
        return self.norm(x)


def sincos_2d(rows, cols, dim, dtype=torch.float32):
    """Fixed 2-D sine/cosine position code, shape (rows*cols, dim)."""
    if dim % 4:
        raise ContractViolation(f"2-D position code needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys, xs = torch.meshgrid(torch.arange(rows, dtype=torch.float64), torch.arange(cols, dtype=torch.float64), indexing="ij")
    ys, xs = ys.reshape(-1, 1) * omega, xs.reshape(-1, 1) * omega
    return torch.cat([ys.sin(), ys.cos(), xs.sin(), xs.cos()], dim=1).to(dtype)


class ImageEncoder(nn.Module):
    """Two-stage hierarchical patch encoder, kept frozen.

    Stage 1 embeds half-size patches, stage 2 merges 2x2 neighbourhoods, so
    the output grid is ``image_size / patch_size`` on each side. Outputs are
    always detached: no gradient reaches these parameters even if someone
    flips ``requires_grad`` back on.
    """

    def __init__(self, d_model, image_size, patch_size):
        super().__init__()
        if patch_size % 2 or image_size % patch_size:
            raise ContractViolation("patch_size must be even and divide image_size")
        c1 = max(d_model // 2, 4)
        self.image_size = image_size
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.embed = nn.Conv2d(3, c1, kernel_size=patch_size // 2, stride=patch_size // 2)
        self.stage1 = EncoderLayer(c1, 1)
        self.merge = nn.Linear(4 * c1, d_model)
        self.stage2 = EncoderLayer(d_model, 1)
        self.proj = nn.Linear(d_model, d_model)
        self.register_buffer("pos", sincos_2d(self.grid, self.grid, d_model), persistent=False)
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def n_patches(self):
        return self.grid * self.grid

    @torch.no_grad()
    def forward(self, pixels):
        # pixels: (B, 3, S, S) normalized floats
        x = self.embed(pixels)
        b, c, g1, _ = x.shape
        x = self.stage1(x.flatten(2).transpose(1, 2))
        x = x.view(b, g1 // 2, 2, g1 // 2, 2, c).permute(0, 1, 3, 2, 4, 5).reshape(b, self.grid * self.grid, 4 * c)
        x = self.stage2(self.merge(x))
        x = self.proj(x) + self.pos.to(x.dtype)
        return x.detach()


def preprocess_image(image, image_size, dtype=torch.float32) -> torch.Tensor:
    """HxWx3 uint8 array -> (3, S, S) tensor scaled to [-1, 1]."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise RejectedInput(f"expected an RGB uint8 image, got shape {image.shape} dtype {image.dtype}")
    if image.shape[:2] != (image_size, image_size):
        from PIL import Image

        image = np.asarray(Image.fromarray(image).resize((image_size, image_size), Image.BILINEAR))
    t = torch.from_numpy(np.array(image, copy=True)).permute(2, 0, 1).to(dtype)
    return t / 127.5 - 1.0


class BiAttentionFusion(nn.Module):
    """Text attends to image and image attends to text, with separate weights."""

    def __init__(self, d_model, heads):
        super().__init__()
        self.text_to_image = MultiHeadAttention(d_model, heads)
        self.image_to_text = MultiHeadAttention(d_model, heads)

    def forward(self, text: torch.Tensor, image: torch.Tensor, text_mask=None) -> FusedFeatures:
        if text.shape[-1] != image.shape[-1]:
            raise ContractViolation(f"text dim {text.shape[-1]} != image dim {image.shape[-1]}")
        H_T0 = self.text_to_image(text, image)
        I_B = self.image_to_text(image, text, key_mask=text_mask)
        return FusedFeatures(H_T0=H_T0, I_B=I_B)


def relevance_scores(I_B, H_T0, text_mask=None):
    """Per image feature, its best dot-product match over (unpadded) text positions."""
    S = I_B @ H_T0.transpose(-1, -2)
    if text_mask is not None:
        S = S.masked_fill(~text_mask.unsqueeze(-2), float("-inf"))
    return S.max(dim=-1).values


def top_indices(scores, n_q):
    """Indices of the ``n_q`` largest scores; equal scores keep the lower index first."""
    n = scores.shape[-1]
    if not 1 <= n_q <= n:
        raise ContractViolation(f"n_q={n_q} outside [1, {n}]")
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices
    return order[..., :n_q]


def select_queries(fused: FusedFeatures, n_q: int, text_mask=None) -> SelectedQueries:
    scores = relevance_scores(fused.I_B, fused.H_T0, text_mask)
    idx = top_indices(scores.detach(), n_q)
    gather = idx.unsqueeze(-1).expand(*idx.shape, fused.I_B.shape[-1])
    I_Q = torch.gather(fused.I_B, -2, gather)
    return SelectedQueries(indices=idx, I_Q=I_Q, scores=scores)


def encode_text(encoder: TextEncoder, tokenizer, augmented: str) -> TextFeatures:
    """Tokenize, truncate to the encoder's limit and encode a single text."""
    if not augmented:
        raise RejectedInput("augmented text is empty")
    ids = tokenizer.encode(augmented)
    if len(ids) > encoder.max_tokens:
        log.info("truncating input from %d to %d tokens", len(ids), encoder.max_tokens)
        ids = ids[: encoder.max_tokens]
    device = encoder.pos.weight.device
    ids_t = torch.tensor([ids], dtype=torch.long, device=device)
    mask = torch.ones_like(ids_t, dtype=torch.bool)
    H = encoder(ids_t, mask)
    return TextFeatures(H_T=H[0], token_ids=ids_t[0], attention_mask=mask[0])


def encode_image(encoder: ImageEncoder, image) -> ImageFeatures:
    dtype = encoder.proj.weight.dtype
    pixels = preprocess_image(image, encoder.image_size, dtype).unsqueeze(0)
    I_E = encoder(pixels)
    return ImageFeatures(I_E=I_E[0], patch_grid=(encoder.grid, encoder.grid))


def bidirectional_fuse(fusion: BiAttentionFusion, text: TextFeatures, image: ImageFeatures) -> FusedFeatures:
    return fusion(text.H_T, image.I_E, text.attention_mask)
