import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import attention_oracle, attention_params
from tankcast.attention import (MultiHeadAttention, attention_arrows, cross_attend_target,
                                multi_head_attention, read_arrows_csv, self_attend_vehicles,
                                write_arrows_csv)
from tankcast.errors import EmptyContext, InvalidArgument


def _attn(dim=8, heads=4, seed=0):
    torch.manual_seed(seed)
    a = MultiHeadAttention(dim, heads).double().eval()
    with torch.no_grad():  # non-default norm affine so the oracle exercises it
        for ln in (a.norm_q, a.norm_kv):
            ln.weight.uniform_(0.5, 1.5)
            ln.bias.uniform_(-0.2, 0.2)
    return a


def test_matches_scalar_oracle_on_2x2():
    a = MultiHeadAttention(2, 1).double()
    with torch.no_grad():
        a.norm_q.weight.copy_(torch.tensor([1.0, 2.0]))
        a.norm_q.bias.copy_(torch.tensor([0.1, -0.1]))
        a.norm_kv.weight.copy_(torch.tensor([0.5, 1.0]))
        a.norm_kv.bias.copy_(torch.tensor([0.0, 0.3]))
        a.q.weight.copy_(torch.tensor([[1.0, 0.5], [-0.5, 1.0]]))
        a.q.bias.copy_(torch.tensor([0.1, 0.2]))
        a.k.weight.copy_(torch.tensor([[0.3, -0.2], [0.7, 0.1]]))
        a.k.bias.copy_(torch.tensor([0.0, -0.1]))
        a.v.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 2.0]]))
        a.v.bias.copy_(torch.tensor([0.5, 0.5]))
        a.out.weight.copy_(torch.tensor([[0.2, 0.4], [0.6, -0.8]]))
        a.out.bias.copy_(torch.tensor([-0.3, 0.3]))
    q = [[1.0, -2.0]]
    kv = [[0.5, 1.5], [2.0, -1.0]]
    out, w = multi_head_attention(torch.tensor([q], dtype=torch.float64),
                                  torch.tensor([kv], dtype=torch.float64),
                                  torch.tensor([kv], dtype=torch.float64), a)
    ref_out, ref_w = attention_oracle(q, kv, attention_params(a), 1)
    assert np.allclose(out[0].detach().numpy(), ref_out, atol=1e-6)
    assert np.allclose(w[0, 0].detach().numpy(), ref_w[0][0], atol=1e-6)


def test_matches_oracle_multi_head():
    a = _attn(8, 4)
    g = torch.Generator().manual_seed(2)
    q = torch.randn(1, 3, 8, dtype=torch.float64, generator=g)
    kv = torch.randn(1, 5, 8, dtype=torch.float64, generator=g)
    out, w = a(q, kv, kv)
    ref_out, ref_w = attention_oracle(q[0].tolist(), kv[0].tolist(), attention_params(a), 4)
    assert np.allclose(out[0].detach().numpy(), ref_out, atol=1e-9)
    assert np.allclose(w[0].permute(1, 0, 2).detach().numpy(), ref_w, atol=1e-9)


def test_single_key_gives_unit_weight_and_projected_value():
    a = _attn()
    q = torch.randn(2, 3, 8, dtype=torch.float64)
    kv = torch.randn(2, 1, 8, dtype=torch.float64)
    out, w = a(q, kv, kv)
    assert torch.allclose(w, torch.ones_like(w))
    expected = a.out(a.v(a.norm_kv(kv)))
    assert torch.allclose(out, expected.expand_as(out), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
def test_weight_rows_are_distributions(lq, lk, seed):
    a = _attn(seed=seed % 7)
    g = torch.Generator().manual_seed(seed)
    _, w = a(torch.randn(2, lq, 8, dtype=torch.float64, generator=g),
             *(2 * [torch.randn(2, lk, 8, dtype=torch.float64, generator=g)]))
    assert (w >= 0).all()
    assert torch.allclose(w.sum(-1), torch.ones(2, 4, lq, dtype=torch.float64), atol=1e-6)


def test_errors():
    a = _attn()
    with pytest.raises(EmptyContext):
        a(torch.randn(1, 1, 8), torch.zeros(1, 0, 8), torch.zeros(1, 0, 8))
    with pytest.raises(InvalidArgument):
        a(torch.randn(1, 1, 8), torch.randn(1, 2, 8), torch.randn(1, 3, 8))
    with pytest.raises(InvalidArgument):
        MultiHeadAttention(6, 4)


def test_self_attention_single_and_empty():
    a = _attn()
    z = torch.randn(1, 1, 8, dtype=torch.float64)
    out, _ = a(z, z, z)
    assert torch.equal(self_attend_vehicles(z, a), out)
    empty = torch.zeros(1, 0, 8, dtype=torch.float64)
    assert self_attend_vehicles(empty, a).shape == (1, 0, 8)


def test_self_attention_duplicate_rows_match():
    a = _attn()
    z = torch.randn(1, 4, 8, dtype=torch.float64)
    z[0, 3] = z[0, 1]
    out = self_attend_vehicles(z, a)
    assert torch.allclose(out[0, 1], out[0, 3], atol=1e-12)


def test_self_attention_rows_see_every_vehicle():
    a = _attn()
    z = torch.randn(1, 4, 8, dtype=torch.float64, requires_grad=True)
    out = self_attend_vehicles(z, a)
    grad, = torch.autograd.grad(out[0, 0].sum(), z)
    assert (grad[0].abs().sum(-1) > 0).all()


def test_cross_attention_single_and_empty():
    a = _attn()
    zt = torch.randn(2, 8, dtype=torch.float64)
    z, w = cross_attend_target(zt, torch.randn(2, 1, 8, dtype=torch.float64), a)
    assert torch.allclose(w, torch.ones(2, 1, dtype=torch.float64))
    z0, w0 = cross_attend_target(zt, torch.zeros(2, 0, 8, dtype=torch.float64), a)
    assert not z0.any() and w0.shape == (2, 0)


def test_masked_keys_are_ignored():
    a = _attn()
    zt = torch.randn(1, 8, dtype=torch.float64)
    Z = torch.randn(1, 5, 8, dtype=torch.float64)
    mask = torch.tensor([[True, True, False, True, False]])
    z_m, w_m = cross_attend_target(zt, Z, a, mask)
    keep = mask[0]
    z_ref, w_ref = cross_attend_target(zt, Z[:, keep], a)
    assert torch.allclose(z_m, z_ref, atol=1e-12)
    assert torch.allclose(w_m[:, keep], w_ref, atol=1e-12) and not w_m[:, ~keep].any()
    none = torch.zeros(1, 5, dtype=torch.bool)
    z_n, w_n = cross_attend_target(zt, Z, a, none)
    assert not z_n.any() and not w_n.any()


def test_eval_outputs_are_bitwise_repeatable():
    a = _attn()
    zt = torch.randn(1, 8, dtype=torch.float64)
    Z = torch.randn(1, 5, 8, dtype=torch.float64)
    w1 = cross_attend_target(zt, self_attend_vehicles(Z, a), a)[1]
    w2 = cross_attend_target(zt, self_attend_vehicles(Z, a), a)[1]
    assert torch.equal(w1, w2)


def test_arrow_records_round_trip(tmp_path):
    rows = attention_arrows(7, [1, 2, 3], [0.5, 0.25, 0.25])
    assert rows == [(7, 1, 0.5), (7, 2, 0.25), (7, 3, 0.25)]
    write_arrows_csv(tmp_path / "a.csv", rows)
    assert read_arrows_csv(tmp_path / "a.csv") == rows
    with pytest.raises(InvalidArgument):
        attention_arrows(7, [1], [0.5, 0.5])
