"""Attention, encoder and decoder stacks"""

import pytest
import torch

from signbert.transformer import (
    EncoderLayer,
    MultiHeadAttention,
    TransformerDecoder,
    TransformerEncoder,
    cascaded_cross_attention,
    causal_mask,
    decoder_forward,
    encoder_forward,
    key_padding_mask,
    multi_head_attention,
)

D = 8


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def test_single_key_ignores_the_query():
    attn = MultiHeadAttention(D, 2).double()
    value = torch.randn(1, 1, D, dtype=torch.float64)
    a, _ = attn(torch.randn(1, 3, D, dtype=torch.float64), value, value)
    b, _ = attn(torch.randn(1, 3, D, dtype=torch.float64), value, value)
    expected = attn.out_proj(attn.v_proj(value))
    torch.testing.assert_close(a, expected.expand(1, 3, D))
    torch.testing.assert_close(b, a)


def test_mask_leaving_one_key_gives_weight_one():
    attn = MultiHeadAttention(D, 2)
    x = torch.randn(2, 5, D)
    mask = torch.zeros(1, 1, 1, 5, dtype=torch.bool)
    mask[..., 3] = True
    _, weights = attn(x, x, x, mask)
    torch.testing.assert_close(weights[..., 3], torch.ones(2, 2, 5))
    assert torch.all(weights[..., [0, 1, 2, 4]] == 0.0)


def test_attention_rows_are_distributions():
    attn = MultiHeadAttention(D, 4)
    x = torch.randn(3, 7, D)
    padding = torch.zeros(3, 7, dtype=torch.bool)
    padding[1, 5:] = True
    _, weights = attn(x, x, x, key_padding_mask(padding))
    assert torch.all(weights >= 0)
    torch.testing.assert_close(weights.sum(-1), torch.ones(3, 4, 7), atol=1e-6, rtol=0)
    assert torch.all(weights[1, :, :, 5:] == 0.0)


def test_head_count_must_divide_width():
    with pytest.raises(ValueError):
        MultiHeadAttention(10, 4)


def test_causal_mask_shape():
    mask = causal_mask(3)
    assert mask.tolist() == [[True, False, False], [True, True, False], [True, True, True]]


@pytest.mark.parametrize("length", [1, 4, 19])
def test_encoder_preserves_shape(length):
    encoder = TransformerEncoder(D, 3, 2, 16, dropout=0.0)
    x = torch.randn(2, length, D)
    assert encoder(x).shape == x.shape


def test_encoder_is_permutation_equivariant():
    encoder = TransformerEncoder(D, 2, 2, 16, dropout=0.0).double().eval()
    x = torch.randn(1, 6, D, dtype=torch.float64)
    perm = torch.randperm(6)
    torch.testing.assert_close(encoder(x[:, perm]), encoder(x)[:, perm])


def test_padded_positions_do_not_leak():
    encoder = TransformerEncoder(D, 2, 2, 16, dropout=0.0).eval()
    x = torch.randn(1, 6, D)
    padding = torch.tensor([[False] * 4 + [True] * 2])
    changed = x.clone()
    changed[:, 4:] = torch.randn(1, 2, D)
    torch.testing.assert_close(encoder(x, padding)[:, :4], encoder(changed, padding)[:, :4])


def test_encoder_layer_gradcheck():
    layer = EncoderLayer(4, 2, 8, dropout=0.0).double()
    x = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda inp: layer(inp).sum(), (x,), eps=1e-6, atol=1e-4, rtol=1e-4)


@pytest.mark.parametrize("fused", [False, True])
def test_decoder_is_causal(fused):
    decoder = TransformerDecoder(D, 2, 2, 16, dropout=0.0, fused=fused).double().eval()
    memory = torch.randn(1, 5, D, dtype=torch.float64)
    rgb = torch.randn(1, 4, D, dtype=torch.float64) if fused else None
    target = torch.randn(1, 6, D, dtype=torch.float64)
    base = decoder(target, memory, rgb_memory=rgb)

    for i in range(5):
        perturbed = target.clone()
        perturbed[:, i + 1:] += torch.randn(1, 5 - i, D, dtype=torch.float64)
        out = decoder(perturbed, memory, rgb_memory=rgb)
        assert torch.max(torch.abs(out[:, :i + 1] - base[:, :i + 1])) <= 1e-9


def test_memory_reaches_every_position():
    decoder = TransformerDecoder(D, 1, 2, 16, dropout=0.0).eval()
    target = torch.randn(1, 4, D)
    a = decoder(target, torch.randn(1, 3, D))
    b = decoder(target, torch.randn(1, 3, D))
    assert torch.all(torch.abs(a - b).amax(dim=-1) > 0)


def test_single_token_decoder_trace():
    decoder = TransformerDecoder(D, 1, 2, 16, dropout=0.0).double().eval()
    layer = decoder.layers[0]
    x = torch.randn(1, 1, D, dtype=torch.float64)
    m = torch.randn(1, 1, D, dtype=torch.float64)

    h = layer.norm1(layer.self_attn.out_proj(layer.self_attn.v_proj(x)) + x)
    h = layer.norm2(layer.cross_attn.out_proj(layer.cross_attn.v_proj(m)) + h)
    h = layer.norm3(layer.feed_forward(h) + h)
    torch.testing.assert_close(decoder(x, m), h)


def test_fused_decoder_requires_rgb_memory():
    decoder = TransformerDecoder(D, 1, 2, 16, fused=True)
    with pytest.raises(ValueError):
        decoder(torch.randn(1, 2, D), torch.randn(1, 3, D))


def test_cascade_with_silenced_rgb_stage():
    pose_attn = MultiHeadAttention(D, 2).double()
    rgb_attn = MultiHeadAttention(D, 2).double()
    with torch.no_grad():
        rgb_attn.v_proj.weight.zero_()
        rgb_attn.v_proj.bias.zero_()
    q = torch.randn(2, 3, D, dtype=torch.float64)
    pose = torch.randn(2, 5, D, dtype=torch.float64)
    rgb = torch.zeros(2, 1, D, dtype=torch.float64)

    out = cascaded_cross_attention(q, pose, rgb, pose_attn, rgb_attn)
    plain, _ = pose_attn(q, pose, pose)
    torch.testing.assert_close(out, plain + rgb_attn.out_proj.bias)
    assert out.shape == q.shape


def test_cascade_is_order_sensitive():
    pose_attn, rgb_attn = MultiHeadAttention(D, 2), MultiHeadAttention(D, 2)
    q = torch.randn(1, 3, D)
    a, b = torch.randn(1, 4, D), torch.randn(1, 4, D)
    forward = cascaded_cross_attention(q, a, b, pose_attn, rgb_attn)
    swapped = cascaded_cross_attention(q, b, a, pose_attn, rgb_attn)
    assert not torch.allclose(forward, swapped)


def test_cascade_needs_both_memories():
    attn = MultiHeadAttention(D, 2)
    with pytest.raises(ValueError):
        cascaded_cross_attention(torch.randn(1, 1, D), torch.randn(1, 1, D), None, attn, attn)


def test_functional_entry_points_match_the_modules():
    attn = MultiHeadAttention(D, 2).eval()
    x = torch.randn(2, 4, D)
    torch.testing.assert_close(multi_head_attention(x, x, x, attn), attn(x, x, x)[0])

    encoder = TransformerEncoder(D, 2, 2, 16, dropout=0.0).eval()
    memory = encoder_forward(x, encoder)
    assert memory.shape == x.shape
    torch.testing.assert_close(memory, encoder(x))

    decoder = TransformerDecoder(D, 1, 2, 16, dropout=0.0).eval()
    targets = torch.randn(2, 3, D)
    torch.testing.assert_close(decoder_forward(targets, memory, decoder), decoder(targets, memory))
