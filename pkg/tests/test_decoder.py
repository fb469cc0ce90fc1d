import math

import pytest
import torch

from helpers import central_difference, relative_error
from procplan.attention import cross_attention
from procplan.decoder import StepDecoder, sd_loss, total_loss
from procplan.errors import ShapeError, ValidationError


def rand(*shape, seed=1):
    return torch.randn(*shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


@pytest.fixture
def decoder():
    torch.manual_seed(0)
    return StepDecoder(horizon=3, n_steps=5, d_model=8, d_lm=6, n_heads=2).double()


@torch.no_grad()
def oracle(q, ctx, attn):
    d_h = attn.d_head
    heads = []
    for h in range(attn.n_heads):
        r = slice(h * d_h, (h + 1) * d_h)
        qq = q @ attn.q_proj.weight[r].T + attn.q_proj.bias[r]
        kk = ctx @ attn.k_proj.weight[r].T + attn.k_proj.bias[r]
        vv = ctx @ attn.v_proj.weight[r].T + attn.v_proj.bias[r]
        s = qq @ kk.T / math.sqrt(d_h)
        w = torch.exp(s - s.max(-1, keepdim=True).values)
        heads.append(w / w.sum(-1, keepdim=True) @ vv)
    return q + torch.cat(heads, -1) @ attn.out_proj.weight.T + attn.out_proj.bias


def test_step_decode_arity_and_oracle(decoder):
    ctx = rand(5, 8)
    out = decoder.step_decode(ctx)
    assert out.shape == (3, 8)
    assert torch.allclose(out, oracle(decoder.queries, ctx, decoder.step_decoder), atol=1e-12)
    assert decoder.step_decode(rand(4, 5, 8)).shape == (4, 3, 8)


def test_step_decode_context_check(decoder):
    with pytest.raises(ShapeError):
        decoder.step_decode(rand(4, 8))


def test_duplicate_context_token(decoder):
    ctx = rand(5, 8)
    a = cross_attention(decoder.queries, ctx, decoder.step_decoder)
    b = cross_attention(decoder.queries, torch.cat([ctx, ctx]), decoder.step_decoder)
    assert torch.allclose(a, b, atol=1e-12)


def test_knowledge_fuse_oracle_and_zero_h(decoder):
    r, h = rand(3, 8), rand(3, 6, seed=2)
    expected = oracle(r, h @ decoder.fusion_projection.weight.T + decoder.fusion_projection.bias,
                      decoder.knowledge_fusion)
    assert torch.allclose(decoder.knowledge_fuse(r, h), expected, atol=1e-12)
    with torch.no_grad():
        decoder.fusion_projection.bias.zero_()
        decoder.knowledge_fusion.v_proj.bias.zero_()
        decoder.knowledge_fusion.out_proj.bias.zero_()
    assert torch.equal(decoder.knowledge_fuse(r, torch.zeros(3, 6, dtype=torch.float64)), r)
    with pytest.raises(ShapeError):
        decoder.knowledge_fuse(r, rand(2, 6))


def test_step_refine(decoder):
    r, y = rand(3, 8), rand(5, 8, seed=3)
    assert torch.allclose(decoder.step_refine(r, y), oracle(r, y, decoder.step_refiner), atol=1e-12)
    single = y[:1]
    attn = decoder.step_refiner
    assert torch.allclose(decoder.step_refine(r, single), r + attn.out_proj(attn.v_proj(single)), atol=1e-12)
    with pytest.raises(ValidationError):
        decoder.step_refine(r, rand(0, 8))


def test_logits_invariant_to_description_order(decoder):
    ctx, y, h = rand(2, 5, 8), rand(5, 8, seed=3), rand(2, 3, 6, seed=4)
    perm = torch.tensor([4, 2, 0, 3, 1])
    logits = decoder(ctx, y, h)
    assert logits.shape == (2, 3, 5)
    assert torch.allclose(logits, decoder(ctx, y[perm], h), atol=1e-12)


def test_sd_uniform_and_concentrated():
    for n in (3, 30):
        gt = torch.tensor([[0, n - 1], [1, 2]])
        assert abs(sd_loss(torch.zeros(2, 2, n, dtype=torch.float64), gt).item() - math.log(n)) < 1e-12
    logits = torch.full((1, 2, 4), -60.0, dtype=torch.float64)
    logits[0, 0, 1] = logits[0, 1, 3] = 60.0
    assert sd_loss(logits, torch.tensor([[1, 3]])).item() < 1e-40


def test_sd_hand_value():
    logits = torch.tensor([[[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]], dtype=torch.float64)
    gt = [1, 0]
    terms = []
    for t in range(2):
        row = logits[0, t].tolist()
        terms.append(math.log(sum(math.exp(x) for x in row)) - row[gt[t]])
    assert abs(sd_loss(logits, torch.tensor([gt])).item() - sum(terms) / 2) < 1e-12


def test_sd_rejects_bad_ids():
    with pytest.raises(ValidationError):
        sd_loss(torch.zeros(1, 2, 3), torch.tensor([[0, 3]]))
    with pytest.raises(ValidationError):
        sd_loss(torch.zeros(1, 2, 3), torch.tensor([[-1, 0]]))


def test_total_loss_sum_and_gradient():
    assert total_loss(0.1, 0.2, 0.3) == pytest.approx(0.6, abs=1e-15)
    terms = [torch.tensor(v, dtype=torch.float64, requires_grad=True) for v in (0.4, 1.1, 2.5)]
    total_loss(*terms).backward()
    assert all(t.grad.item() == 1.0 for t in terms)


def test_decoder_gradients(decoder):
    ctx, y, h = rand(2, 5, 8), rand(5, 8, seed=3), rand(2, 3, 6, seed=4)
    gt = torch.tensor([[0, 4, 2], [1, 1, 3]])

    def loss():
        return sd_loss(decoder(ctx, y, h), gt)

    decoder.zero_grad()
    loss().backward()
    for tensor in (decoder.queries, decoder.step_decoder.q_proj.weight, decoder.knowledge_fusion.v_proj.weight,
                   decoder.fusion_projection.weight, decoder.step_refiner.k_proj.weight, decoder.classifier.bias):
        numeric = central_difference(lambda: loss().item(), tensor)["value"]
        assert relative_error(tensor.grad, numeric) < 1e-4
