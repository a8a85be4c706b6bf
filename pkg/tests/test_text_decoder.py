import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cofipara.errors import ContractViolation
from cofipara.sample import Stance
from cofipara.text_decoder import DecoderState, TextDecoder, label_to_text, text_loss, text_to_label
from cofipara.tokenizer import EOS, SEP_ID, VOCAB_SIZE, ByteTokenizer
from oracles import token_nll_reference


def make_decoder(d=8, heads=2, layers=2, seed=0):
    torch.manual_seed(seed)
    return TextDecoder(torch.nn.Embedding(VOCAB_SIZE, d), d, heads, layers, max_len=20).double().eval()


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_zero_queries_reduce_to_lm_layer():
    dec = make_decoder()
    layer = dec.layers[0]
    with torch.no_grad():
        layer.image_attn.v_proj.bias.zero_()
    H, mem = rand(1, 3, 8, seed=1), rand(1, 5, 8, seed=2)
    state = dec.decode_layer(DecoderState(H, 0, dec.L), torch.zeros(1, 4, 8, dtype=torch.float64), mem)
    assert state.H.shape == (1, 3, 8)
    assert torch.equal(state.H, layer.lm(H, mem))


def test_layer_stack_matches_unrolled_oracle():
    dec = make_decoder()
    ids = torch.tensor([[1, 50, 60, 70]])
    mem, mask = rand(1, 5, 8, seed=3), torch.tensor([[True, True, True, False, False]])
    I_Q = rand(1, 4, 8, seed=4)
    h = dec.embed(ids)
    for layer in dec.layers:
        # LM_dec(h) then cross-attention to the queries, summed
        lm_out = layer.lm(h, mem, mask)
        h = lm_out + layer.image_attn(h, I_Q)
    ref = torch.nn.functional.linear(dec.norm(h), dec.embedding.weight)
    assert torch.allclose(dec(ids, mem, mask, I_Q), ref, atol=1e-12)
    state = DecoderState(dec.embed(ids), 0, dec.L)
    while state.layer_index < dec.L:
        state = dec.decode_layer(state, I_Q, mem, mask)
    assert torch.allclose(state.H, h, atol=1e-12)
    with pytest.raises(ContractViolation):
        dec.decode_layer(state, I_Q, mem, mask)


def test_dimension_mismatch():
    dec = make_decoder()
    with pytest.raises(ContractViolation):
        dec.decode_layer(DecoderState(rand(1, 3, 8), 0, 2), rand(1, 4, 6), rand(1, 5, 8))


def test_generation_bounds_and_determinism():
    dec = make_decoder()
    mem, mask, I_Q = rand(2, 5, 8, seed=5), torch.ones(2, 5, dtype=torch.bool), rand(2, 4, 8, seed=6)
    one = dec.generate(mem, mask, I_Q, max_len=1)
    assert all(len(t) <= 1 for t in one)
    a = dec.generate(mem, mask, I_Q, max_len=10)
    assert a == dec.generate(mem, mask, I_Q, max_len=10)
    assert all(len(t) <= 10 for t in a)


def test_text_loss_closed_forms():
    targets = torch.tensor([3, 1, 4])
    perfect = torch.full((3, 8), -1e9, dtype=torch.float64)
    perfect[torch.arange(3), targets] = 0.0
    assert text_loss(perfect, targets).item() == 0.0
    uniform = torch.zeros(3, 8, dtype=torch.float64)
    assert text_loss(uniform, targets).item() == pytest.approx(math.log(8), abs=1e-12)
    assert math.log(8) == pytest.approx(2.0794, abs=1e-4)
    with pytest.raises(ContractViolation):
        text_loss(uniform, torch.zeros(3, dtype=torch.long))
    with pytest.raises(ContractViolation):
        text_loss(uniform[:0], targets[:0])


def test_text_loss_matches_scalar_oracle():
    g = torch.Generator().manual_seed(7)
    logits = torch.randn(2, 6, 11, generator=g, dtype=torch.float64)
    targets = torch.tensor([[3, 5, 2, 0, 0, 0], [1, 4, 4, 9, 10, 2]])
    ref = sum(token_nll_reference(logits[b].tolist(), targets[b].tolist()) for b in range(2)) / 2
    assert text_loss(logits, targets).item() == pytest.approx(ref, abs=1e-6)


def test_label_round_trip():
    for s in Stance:
        assert text_to_label(label_to_text(s)) is s
        assert text_to_label(ByteTokenizer().decode(ByteTokenizer().encode(label_to_text(s)))) is s
    assert text_to_label("maybe") is None


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=40))
def test_tokenizer_round_trip(text):
    tok = ByteTokenizer()
    assert tok.decode(tok.encode(text)) == text
    ids = tok.encode(text, add_eos=True)
    assert ids[-1] == EOS and all(0 <= i < VOCAB_SIZE for i in ids)


def test_separator_is_one_token():
    assert ByteTokenizer().encode("a <sep> b").count(SEP_ID) == 1
