"""Query-based detection decoder, box/confidence heads, matching and losses."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .boxes import BoundingBox, giou_tensor, pairwise_giou_tensor
from .errors import ContractViolation
from .fusion import FeedForward, FusedFeatures, MultiHeadAttention

# Weights of the L1, GIoU and confidence terms.
DEFAULT_LOSS_WEIGHTS = (0.2, 1e-3, 0.1)


class ImageDecoderLayer(nn.Module):
    """Self-attention over queries, then attention to I_B, then to H_T0, then FFN."""

    def __init__(self, d_model, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.image_attn = MultiHeadAttention(d_model, heads)
        self.norm3 = nn.LayerNorm(d_model)
        self.text_attn = MultiHeadAttention(d_model, heads)
        self.norm4 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model)

    def forward(self, q, I_B, H_T0, text_mask=None):
        if q.shape[-1] != I_B.shape[-1] or q.shape[-1] != H_T0.shape[-1]:
            raise ContractViolation("query, image and text feature dims differ")
        x = self.norm1(q)
        q = q + self.self_attn(x, x)
        q = q + self.image_attn(self.norm2(q), I_B)
        q = q + self.text_attn(self.norm3(q), H_T0, key_mask=text_mask)
        return q + self.ffn(self.norm4(q))


@dataclass
class ImageDecoderState:
    I_Q: torch.Tensor
    layer_index: int
    K: int


class ImageDecoder(nn.Module):
    def __init__(self, d_model, heads, layers):
        super().__init__()
        self.layers = nn.ModuleList(ImageDecoderLayer(d_model, heads) for _ in range(layers))

    @property
    def K(self):
        return len(self.layers)

    def decode_layer(self, state: ImageDecoderState, fused: FusedFeatures, text_mask=None) -> ImageDecoderState:
        if state.layer_index >= state.K:
            raise ContractViolation(f"layer index {state.layer_index} >= K={state.K}")
        q = self.layers[state.layer_index](state.I_Q, fused.I_B, fused.H_T0, text_mask)
        return ImageDecoderState(I_Q=q, layer_index=state.layer_index + 1, K=state.K)

    def forward(self, I_Q, fused: FusedFeatures, text_mask=None):
        state = ImageDecoderState(I_Q=I_Q, layer_index=0, K=self.K)
        while state.layer_index < self.K:
            state = self.decode_layer(state, fused, text_mask)
        return state.I_Q


class DetectionHeads(nn.Module):
    """Per query: sigmoid-squashed (cx, cy, w, h) and a confidence logit."""

    def __init__(self, d_model):
        super().__init__()
        self.box_hidden = nn.Linear(d_model, d_model)
        self.box_out = nn.Linear(d_model, 4)
        self.conf = nn.Linear(d_model, 1)

    def forward(self, q):
        boxes = torch.sigmoid(self.box_out(F.gelu(self.box_hidden(q))))
        return boxes, self.conf(q).squeeze(-1)


def box_head(heads: DetectionHeads, final_state: ImageDecoderState):
    if final_state.layer_index != final_state.K:
        raise ContractViolation("box_head expects the state after the last decoder layer")
    boxes, logits = heads(final_state.I_Q)
    return to_candidates(boxes, logits)


def to_candidates(boxes: torch.Tensor, conf_logits: torch.Tensor) -> list[tuple[BoundingBox, float]]:
    """Convert one image's head outputs to (box, confidence) pairs.

    Widths/heights that underflow to 0 are nudged to the smallest positive
    float so that every candidate is a valid box.
    """
    conf = torch.sigmoid(conf_logits).detach().double().cpu().numpy()
    arr = boxes.detach().double().cpu().numpy()
    out = []
    for (cx, cy, w, h), c in zip(arr, conf):
        w = max(float(w), np.nextafter(0.0, 1.0))
        h = max(float(h), np.nextafter(0.0, 1.0))
        out.append((BoundingBox(float(cx), float(cy), w, h), float(c)))
    return out


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]  # (query index, gt index), sorted by gt index
    n_queries: int
    total_cost: float

    @property
    def matched_queries(self):
        return [q for q, _ in self.pairs]

    def unmatched(self):
        taken = set(self.matched_queries)
        return [q for q in range(self.n_queries) if q not in taken]


def _as_box_tensor(boxes):
    if isinstance(boxes, torch.Tensor):
        return boxes.detach().double().reshape(-1, 4)
    return torch.tensor([b.to_list() for b in boxes], dtype=torch.float64).reshape(-1, 4)


def matching_cost_matrix(pred_boxes, pred_conf, gt_boxes, weights=DEFAULT_LOSS_WEIGHTS) -> np.ndarray:
    """Cost of assigning each ground truth (rows) to each query (columns).

    ``pred_conf`` are probabilities in [0, 1]. The L1 term is the mean
    absolute center-size difference, matching the regression loss.
    """
    alpha, beta, gamma = weights
    p = _as_box_tensor(pred_boxes)
    g = _as_box_tensor(gt_boxes)
    conf = torch.as_tensor(np.asarray(pred_conf, dtype=np.float64)).reshape(-1)
    if len(conf) != len(p):
        raise ContractViolation(f"{len(p)} boxes but {len(conf)} confidences")
    l1 = (g[:, None, :] - p[None, :, :]).abs().mean(-1)
    gi = pairwise_giou_tensor(g, p)
    nll = -torch.log(conf.clamp(min=1e-300))
    cost = alpha * l1 + beta * (1.0 - gi) + gamma * nll[None, :]
    return cost.numpy()


def match_predictions(pred_boxes, pred_conf, gt_boxes, weights=DEFAULT_LOSS_WEIGHTS) -> Assignment:
    """Minimum-cost one-to-one assignment of ground truths to queries."""
    n_q = len(pred_boxes)
    n_gt = len(gt_boxes)
    if n_gt > n_q:
        raise ContractViolation(f"{n_gt} ground truths exceed {n_q} queries")
    if n_gt == 0:
        return Assignment(pairs=[], n_queries=n_q, total_cost=0.0)
    cost = matching_cost_matrix(pred_boxes, pred_conf, gt_boxes, weights)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(((int(c), int(r)) for r, c in zip(rows, cols)), key=lambda qg: qg[1])
    total = 0.0
    for q, g in pairs:
        total += float(cost[g, q])
    return Assignment(pairs=pairs, n_queries=n_q, total_cost=total)


def brute_force_assignment(cost: np.ndarray) -> tuple[float, tuple[int, ...]]:
    """Exhaustive minimum over all injections of rows into columns (reference only)."""
    n_gt, n_q = cost.shape
    best = (float("inf"), ())
    for cols in itertools.permutations(range(n_q), n_gt):
        total = 0.0
        for g, q in enumerate(cols):
            total += float(cost[g, q])
        if total < best[0]:
            best = (total, cols)
    return best


@dataclass
class LossBreakdown:
    l_text: torch.Tensor
    l_l1: torch.Tensor
    l_giou: torch.Tensor
    l_cls: torch.Tensor
    l_img: torch.Tensor
    total: torch.Tensor
    alpha: float
    beta: float
    gamma: float

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def combine_losses(l_text, l_l1, l_giou, l_cls, weights=DEFAULT_LOSS_WEIGHTS, with_image=True) -> LossBreakdown:
    """Weighted image loss and the stage total, composed in float64."""
    alpha, beta, gamma = weights
    d = torch.float64
    # python floats go straight to float64 rather than through the default dtype
    l_text, l_l1, l_giou, l_cls = (
        x.to(d) if isinstance(x, torch.Tensor) else torch.tensor(x, dtype=d) for x in (l_text, l_l1, l_giou, l_cls)
    )
    if with_image:
        l_img = alpha * l_l1 + beta * l_giou + gamma * l_cls
        total = l_img + l_text
    else:
        l_img = torch.zeros((), dtype=d)
        total = l_text
    return LossBreakdown(l_text, l_l1, l_giou, l_cls, l_img, total, alpha, beta, gamma)


def image_loss_terms(pred_boxes, conf_logits, gt_boxes, assignment: Assignment):
    """(l_l1, l_giou, l_cls) for a single image.

    Regression terms average over matched pairs and are 0 without ground
    truth; the confidence term is binary cross-entropy over every query,
    target 1 for matched queries and 0 ("no object") for the rest.
    """
    gt = gt_boxes if isinstance(gt_boxes, torch.Tensor) else _as_box_tensor(gt_boxes)
    gt = gt.to(pred_boxes.dtype).reshape(-1, 4)
    target = torch.zeros_like(conf_logits)
    if assignment.pairs:
        q_idx = torch.tensor([q for q, _ in assignment.pairs], dtype=torch.long)
        g_idx = torch.tensor([g for _, g in assignment.pairs], dtype=torch.long)
        p, g = pred_boxes[q_idx], gt[g_idx]
        l_l1 = (p - g).abs().mean()
        l_giou = (1.0 - giou_tensor(p, g)).mean()
        target[q_idx] = 1.0
    else:
        l_l1 = pred_boxes.sum() * 0.0
        l_giou = pred_boxes.sum() * 0.0
    l_cls = F.binary_cross_entropy_with_logits(conf_logits, target)
    return l_l1, l_giou, l_cls


def image_loss(pred_boxes, conf_logits, gt_boxes, assignment, weights=DEFAULT_LOSS_WEIGHTS, l_text=0.0) -> LossBreakdown:
    l_l1, l_giou, l_cls = image_loss_terms(pred_boxes, conf_logits, gt_boxes, assignment)
    return combine_losses(l_text, l_l1, l_giou, l_cls, weights, with_image=True)
