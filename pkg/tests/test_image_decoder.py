import numpy as np
import pytest
import torch

from cofipara.boxes import BoundingBox
from cofipara.errors import ContractViolation
from cofipara.fusion import FusedFeatures
from cofipara.image_decoder import (
    DetectionHeads, ImageDecoder, ImageDecoderState, box_head, combine_losses, image_loss, match_predictions,
    matching_cost_matrix,
)
from oracles import min_cost_injection


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def decoder(K=2):
    torch.manual_seed(0)
    return ImageDecoder(8, 2, K).double().eval()


def test_layer_shape_and_order():
    dec = decoder()
    fused = FusedFeatures(H_T0=rand(1, 5, 8, seed=1), I_B=rand(1, 16, 8, seed=2))
    q = rand(1, 4, 8, seed=3)
    out = dec(q, fused)
    assert out.shape == (1, 4, 8)
    # unrolled oracle: self-attn, attn to I_B, attn to H_T0, FFN, each pre-normed and residual
    h = q
    for layer in dec.layers:
        x = layer.norm1(h)
        h = h + layer.self_attn(x, x)
        h = h + layer.image_attn(layer.norm2(h), fused.I_B)
        h = h + layer.text_attn(layer.norm3(h), fused.H_T0)
        h = h + layer.ffn(layer.norm4(h))
    assert torch.allclose(out, h, atol=1e-12)


def test_zero_value_projections_leave_ffn_only():
    dec = decoder(K=1)
    layer = dec.layers[0]
    with torch.no_grad():
        for attn in (layer.self_attn, layer.image_attn, layer.text_attn):
            attn.v_proj.weight.zero_()
            attn.v_proj.bias.zero_()
    fused = FusedFeatures(H_T0=rand(1, 5, 8, seed=1), I_B=rand(1, 16, 8, seed=2))
    q = rand(1, 4, 8, seed=3)
    assert torch.equal(dec(q, fused), q + layer.ffn(layer.norm4(q)))


def test_layer_rejects_dim_mismatch():
    dec = decoder()
    with pytest.raises(ContractViolation):
        dec(rand(1, 4, 8), FusedFeatures(H_T0=rand(1, 5, 6), I_B=rand(1, 16, 8)))


def test_heads_at_zero_give_centre_box():
    heads = DetectionHeads(8).double()
    with torch.no_grad():
        for p in heads.parameters():
            p.zero_()
    state = ImageDecoderState(I_Q=rand(16, 8), layer_index=2, K=2)
    cands = box_head(heads, state)
    assert len(cands) == 16
    box, conf = cands[0]
    assert box.to_list() == [0.5, 0.5, 0.5, 0.5] and conf == 0.5
    with pytest.raises(ContractViolation):
        box_head(heads, ImageDecoderState(I_Q=rand(16, 8), layer_index=1, K=2))


def test_matching_prefers_overlap():
    gt = [BoundingBox(0.3, 0.3, 0.2, 0.2)]
    preds = torch.tensor([[0.31, 0.3, 0.2, 0.2], [0.8, 0.8, 0.1, 0.1]], dtype=torch.float64)
    a = match_predictions(preds, [0.5, 0.5], gt)
    assert a.pairs == [(0, 0)] and a.unmatched() == [1]
    empty = match_predictions(preds, [0.5, 0.5], [])
    assert empty.pairs == [] and empty.unmatched() == [0, 1]
    with pytest.raises(ContractViolation):
        match_predictions(preds[:1], [0.5], gt * 2)


def test_matching_equals_enumeration_small():
    rng = np.random.default_rng(5)
    for _ in range(50):
        n_gt, n_q = rng.integers(1, 4), rng.integers(3, 6)
        gts = [BoundingBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.05, 0.3, 2)) for _ in range(n_gt)]
        preds = torch.tensor(np.c_[rng.uniform(0.3, 0.7, (n_q, 2)), rng.uniform(0.05, 0.3, (n_q, 2))])
        conf = rng.uniform(0.01, 1, n_q)
        a = match_predictions(preds, conf, gts)
        cost = matching_cost_matrix(preds, conf, gts)
        assert a.total_cost == min_cost_injection(cost)
        assert sorted(g for _, g in a.pairs) == list(range(n_gt))


def test_loss_weights_arithmetic():
    lb = combine_losses(0.0, 1.0, 1.0, 1.0)
    assert lb.l_img.item() == pytest.approx(0.301, abs=1e-12)
    assert lb.total.item() == pytest.approx(0.301, abs=1e-12)
    pre = combine_losses(0.7, 1.0, 1.0, 1.0, with_image=False)
    assert pre.l_img.item() == 0.0 and pre.total.item() == 0.7


def test_perfect_fit_and_no_gt():
    gt = torch.tensor([[0.4, 0.4, 0.2, 0.3]], dtype=torch.float64)
    preds = torch.cat([gt, torch.tensor([[0.8, 0.8, 0.1, 0.1]], dtype=torch.float64)])
    logits = torch.tensor([40.0, -40.0], dtype=torch.float64)
    a = match_predictions(preds, torch.sigmoid(logits).numpy(), [BoundingBox(*gt[0].tolist())])
    lb = image_loss(preds, logits, gt, a)
    assert lb.l_l1.item() == 0.0 and lb.l_giou.item() == pytest.approx(0.0, abs=1e-12)
    assert lb.l_cls.item() < 1e-12
    none = match_predictions(preds, [0.5, 0.5], [])
    lb = image_loss(preds, torch.zeros(2, dtype=torch.float64), torch.zeros(0, 4, dtype=torch.float64), none)
    assert lb.l_l1.item() == 0.0 and lb.l_giou.item() == 0.0
    assert lb.l_img.item() == pytest.approx(0.1 * lb.l_cls.item(), abs=1e-15)
