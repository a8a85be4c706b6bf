"""The full network and batch assembly."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .errors import ContractViolation
from .fusion import BiAttentionFusion, FusedFeatures, ImageEncoder, SelectedQueries, TextEncoder, preprocess_image, select_queries
from .image_decoder import DEFAULT_LOSS_WEIGHTS, Assignment, DetectionHeads, ImageDecoder, combine_losses, image_loss_terms, match_predictions
from .rationale import RationaleSet, pack_input
from .sample import Phase, Sample
from .text_decoder import TextDecoder, label_to_text, text_loss
from .tokenizer import BOS, EOS, PAD, VOCAB_SIZE, ByteTokenizer

MODULE_TAGS = ("text_encoder", "image_encoder", "fusion", "text_decoder", "image_decoder", "heads")
SHARED_TAGS = ("text_encoder", "image_encoder", "fusion", "text_decoder")


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 2
    L: int = 2
    K: int = 2
    n_q: int = 16
    image_size: int = 64
    patch_size: int = 8
    max_tokens: int = 256
    max_target_len: int = 64

    def to_dict(self):
        return asdict(self)


def module_tag(name: str) -> str:
    tag = name.split(".", 1)[0]
    if tag not in MODULE_TAGS:
        raise ContractViolation(f"parameter {name!r} is outside the known modules")
    return tag


@dataclass
class Encoded:
    text: torch.Tensor
    text_mask: torch.Tensor
    fused: FusedFeatures
    queries: SelectedQueries
    memory: torch.Tensor


class CofiPara(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n = (cfg.image_size // cfg.patch_size) ** 2
        if not 1 <= cfg.n_q <= n:
            raise ContractViolation(f"n_q={cfg.n_q} must lie in [1, {n}] for this image/patch size")
        embedding = nn.Embedding(VOCAB_SIZE, cfg.d_model, padding_idx=PAD)
        self.text_encoder = TextEncoder(embedding, cfg.d_model, cfg.heads, cfg.encoder_layers, cfg.max_tokens)
        self.image_encoder = ImageEncoder(cfg.d_model, cfg.image_size, cfg.patch_size)
        self.fusion = BiAttentionFusion(cfg.d_model, cfg.heads)
        self.text_decoder = TextDecoder(embedding, cfg.d_model, cfg.heads, cfg.L, cfg.max_target_len + 1)
        self.image_decoder = ImageDecoder(cfg.d_model, cfg.heads, cfg.K)
        self.heads = DetectionHeads(cfg.d_model)

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def encode(self, ids, mask, image_feats) -> Encoded:
        H_T = self.text_encoder(ids, mask)
        fused = self.fusion(H_T, image_feats, mask)
        queries = select_queries(fused, self.cfg.n_q, mask)
        # the decoder reads the encoder output with the image-attended part added on
        memory = H_T + fused.H_T0
        return Encoded(H_T, mask, fused, queries, memory)

    def text_logits(self, enc: Encoded, dec_in):
        return self.text_decoder(dec_in, enc.memory, enc.text_mask, enc.queries.I_Q)

    def detect(self, enc: Encoded):
        q = self.image_decoder(enc.queries.I_Q, enc.fused, enc.text_mask)
        return self.heads(q)

    def losses(self, batch: "Batch", phase, weights=DEFAULT_LOSS_WEIGHTS, assignments: Optional[Sequence[Assignment]] = None):
        """Stage loss for a batch. Returns (LossBreakdown, assignments used)."""
        phase = Phase(phase)
        image_feats = batch.image_feats if batch.image_feats is not None else self.image_encoder(batch.pixels)
        enc = self.encode(batch.ids, batch.mask, image_feats)
        l_text = text_loss(self.text_logits(enc, batch.dec_in), batch.dec_out)
        if phase is Phase.PRETRAIN:
            zero = torch.zeros((), dtype=torch.float64)
            return combine_losses(l_text, zero, zero, zero, weights, with_image=False), []
        boxes, logits = self.detect(enc)
        if assignments is None:
            assignments = [
                match_predictions(boxes[i], torch.sigmoid(logits[i]).detach().double().numpy(), batch.gt_boxes[i], weights)
                for i in range(len(boxes))
            ]
        terms = [image_loss_terms(boxes[i], logits[i], batch.gt_boxes[i], assignments[i]) for i in range(len(boxes))]
        l_l1, l_giou, l_cls = (torch.stack(t).mean() for t in zip(*terms))
        return combine_losses(l_text, l_l1, l_giou, l_cls, weights, with_image=True), assignments


@dataclass
class Batch:
    sample_ids: list[str]
    ids: torch.Tensor
    mask: torch.Tensor
    pixels: Optional[torch.Tensor]
    image_feats: Optional[torch.Tensor]
    dec_in: Optional[torch.Tensor]
    dec_out: Optional[torch.Tensor]
    gt_boxes: list[torch.Tensor]


def target_text(sample: Sample, phase) -> str:
    if Phase(phase) is Phase.PRETRAIN:
        if sample.msd_label is None:
            raise ContractViolation(f"sample {sample.id!r} has no MSD label")
        return label_to_text(sample.msd_label)
    return sample.target_string()


def _pad(seqs, value=PAD):
    width = max(len(s) for s in seqs)
    return torch.tensor([list(s) + [value] * (width - len(s)) for s in seqs], dtype=torch.long)


def collate(
    samples: Sequence[Sample],
    rationales: Sequence[Optional[RationaleSet]],
    phase,
    cfg: ModelConfig,
    tokenizer: ByteTokenizer,
    with_targets=True,
    image_feats: Optional[torch.Tensor] = None,
    dtype=torch.float32,
) -> Batch:
    texts = [pack_input(s, r, phase) for s, r in zip(samples, rationales)]
    enc = [tokenizer.encode(t)[: cfg.max_tokens] for t in texts]
    ids = _pad(enc)
    mask = ids != PAD
    pixels = None
    if image_feats is None:
        for s in samples:
            if s.image is None:
                raise ContractViolation(f"sample {s.id!r} has no loaded image")
        pixels = torch.stack([preprocess_image(s.image, cfg.image_size, dtype) for s in samples])
    dec_in = dec_out = None
    if with_targets:
        tgt = [tokenizer.encode(target_text(s, phase))[: cfg.max_target_len - 1] for s in samples]
        dec_in = _pad([[BOS] + t for t in tgt])
        dec_out = _pad([t + [EOS] for t in tgt])
    gt = [torch.tensor([b.to_list() for b in s.visual_targets], dtype=dtype).reshape(-1, 4) for s in samples]
    return Batch([s.id for s in samples], ids, mask, pixels, image_feats, dec_in, dec_out, gt)
