import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import gru_oracle, make_battle, make_info, nce_oracle, sinusoid
from tankcast.battle import GLOBAL_TOKENS, VEHICLE_TOKENS, build_example
from tankcast.encoder import (HORIZON_BASE, TIME_BASE, CategoricalVocab, FinalFusion,
                              NumericalCategoricalEncoder, build_vocab, fuse_final,
                              positional_encode)
from tankcast.errors import InvalidArgument
from tankcast.geometry import GridGeometry, KernelSpec
from tankcast.model import EndpointPredictor, ModelConfig, collate, encode_entities
from tankcast.schema import round_up_hundred


# -- positional encoding ----------------------------------------------------------

def test_pe_at_zero():
    pe = positional_encode(0.0, 8, TIME_BASE)
    assert np.array_equal(pe[0::2], np.zeros(4)) and np.array_equal(pe[1::2], np.ones(4))


def test_pe_horizon_value():
    assert positional_encode(3.0, 8, HORIZON_BASE)[0] == pytest.approx(math.sin(3.0), abs=1e-12)
    assert positional_encode(3.0, 8, HORIZON_BASE)[0] == pytest.approx(0.14112, abs=1e-5)


@given(st.floats(-1e6, 1e6), st.sampled_from([2, 8, 16]), st.sampled_from([6.0, 1e4]))
def test_pe_pairs_have_unit_norm(pos, dim, base):
    pe = positional_encode(pos, dim, base)
    assert np.allclose(pe[0::2] ** 2 + pe[1::2] ** 2, 1.0, atol=1e-9)
    assert np.allclose(pe, sinusoid(pos, dim, base), atol=1e-9)


def test_pe_tensor_matches_scalar():
    pos = torch.tensor([0.0, 1.5, 420.0], dtype=torch.float64)
    out = positional_encode(pos, 8, TIME_BASE)
    for i, p in enumerate(pos.tolist()):
        assert np.allclose(out[i].numpy(), positional_encode(p, 8, TIME_BASE))


def test_pe_rejects_bad_args():
    with pytest.raises(InvalidArgument):
        positional_encode(1.0, 7)
    with pytest.raises(InvalidArgument):
        positional_encode(math.nan)


# -- vocab ----------------------------------------------------------------------------

def test_vocab_dense_with_unknown_and_round_trip(tmp_path):
    v = CategoricalVocab({"vtype": ["heavy", "light"], "team": ["ally", "enemy"]})
    assert v.index("vtype", "light") == 2 and v.index("vtype", "never-seen") == 0
    assert v.cardinality("vtype") == 3
    v.save(tmp_path / "v.txt")
    assert CategoricalVocab.load(tmp_path / "v.txt") == v
    (tmp_path / "bad.txt").write_text("vtype\t0\t<unk>\nvtype\t2\theavy\n")
    with pytest.raises(InvalidArgument):
        CategoricalVocab.load(tmp_path / "bad.txt")


# -- NCE ---------------------------------------------------------------------------------

def _encoder(n_dynamic=2, dim=4, seed=0):
    torch.manual_seed(seed)
    enc = NumericalCategoricalEncoder(3, [4, 3], embed_dim=dim, cat_dim=2, n_dynamic=n_dynamic,
                                      time_dim=4).double()
    with torch.no_grad():  # non-trivial frozen statistics
        for bn in (enc.numeric_norm, enc.fuse_norm):
            bn.running_mean.uniform_(-0.5, 0.5)
            bn.running_var.uniform_(0.5, 2.0)
    return enc.eval()


def _inputs(b=3, t=5, seed=1):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(b, 3, dtype=torch.float64, generator=g),
            torch.randint(0, 3, (b, 2), generator=g),
            torch.rand(b, dtype=torch.float64, generator=g) * 300,
            torch.randn(b, t, 2, dtype=torch.float64, generator=g))


def test_nce_matches_hand_rolled_gru():
    enc = _encoder(dim=2)
    num, cats, times, series = _inputs()
    lengths = torch.tensor([5, 3, 1])
    out = enc(num, cats, times, series, lengths).detach().numpy()
    for i in range(3):
        ref = nce_oracle(enc, num[i].numpy(), cats[i].tolist(), float(times[i]),
                         series[i, :int(lengths[i])].numpy())
        assert np.allclose(out[i], ref, atol=1e-6, rtol=0)


def test_nce_without_series_is_static_path():
    enc = _encoder()
    num, cats, times, series = _inputs()
    h = enc.static(num, cats, times)
    assert torch.equal(enc(num, cats, times), h)
    assert torch.equal(enc(num, cats, times, series[:, :0]), h)
    assert torch.equal(enc(num, cats, times, series, torch.zeros(3, dtype=torch.long)), h)
    for i in range(3):
        ref = nce_oracle(enc, num[i].numpy(), cats[i].tolist(), float(times[i]))
        assert np.allclose(h[i].detach().numpy(), ref, atol=1e-9)


def test_zero_projection_and_gru_weights_reduce_to_h():
    enc = _encoder()
    with torch.no_grad():
        for p in list(enc.init_proj.parameters()) + list(enc.gru.parameters()):
            p.zero_()
    num, cats, times, series = _inputs()
    # zero weights: r = z = 1/2, n = 0, so h_T = h0 / 2**T = 0 from h0 = 0
    assert torch.allclose(enc(num, cats, times, series), enc.static(num, cats, times), atol=0)


def test_zero_gru_weights_leave_zero_input_response():
    enc = _encoder()
    with torch.no_grad():
        for p in enc.gru.parameters():
            p.zero_()
    num, cats, times, series = _inputs()
    h = enc.static(num, cats, times)
    h0 = enc.init_proj(h)
    expected = h + h0 / 2 ** series.shape[1]
    assert torch.allclose(enc(num, cats, times, series), expected, atol=1e-12)


def test_nce_errors():
    enc = _encoder()
    num, cats, times, series = _inputs()
    with pytest.raises(InvalidArgument):
        enc(num, cats + 10, times)
    bad = series.clone()
    bad[0, 0, 0] = math.nan
    with pytest.raises(InvalidArgument):
        enc(num, cats, times, bad)
    with pytest.raises(InvalidArgument):
        enc(num[:, :2], cats, times)


def test_nce_eval_is_deterministic():
    enc = _encoder()
    num, cats, times, series = _inputs()
    assert torch.equal(enc(num, cats, times, series), enc(num, cats, times, series))


def test_gru_oracle_agrees_with_torch_cell():
    torch.manual_seed(0)
    cell = torch.nn.GRUCell(3, 4).double()
    x = torch.randn(6, 3, dtype=torch.float64)
    h = torch.randn(4, dtype=torch.float64)
    ref = h[None]
    for t in range(6):
        ref = cell(x[t][None], ref)
    g = lambda t: t.detach().numpy()
    out = gru_oracle(g(x), g(h), g(cell.weight_ih), g(cell.weight_hh), g(cell.bias_ih),
                     g(cell.bias_hh))
    assert np.allclose(out, g(ref[0]), atol=1e-12)


# -- fusion ---------------------------------------------------------------------------------

def test_fusion_zero_weights_give_zero():
    f = FinalFusion(4)
    with torch.no_grad():
        f.linear.weight.zero_()
        f.linear.bias.zero_()
    assert not fuse_final(torch.randn(2, 4), torch.randn(2, 4), torch.tensor([1, 6]), f).any()


def test_fusion_depends_on_horizon():
    torch.manual_seed(0)
    f = FinalFusion(8)
    zc, zg = torch.randn(1, 8), torch.randn(1, 8)
    assert not torch.allclose(f(zc, zg, torch.tensor([2])), f(zc, zg, torch.tensor([5])))


@pytest.mark.parametrize("h", [0, 7])
def test_fusion_rejects_out_of_range_horizon(h):
    with pytest.raises(InvalidArgument):
        FinalFusion(4)(torch.zeros(1, 4), torch.zeros(1, 4), torch.tensor([h]))


def test_fusion_gradient_matches_finite_differences():
    torch.manual_seed(1)
    f = FinalFusion(4).double()
    zc = torch.randn(3, 4, dtype=torch.float64)
    zg = torch.randn(3, 4, dtype=torch.float64)
    readout = torch.randn(3, 4, dtype=torch.float64)
    loss = lambda: (f(zc, zg, torch.tensor([1, 2, 6])) * readout).sum()
    loss().backward()
    grad = f.linear.weight.grad.clone()
    w = f.linear.weight.data.view(-1)
    num = torch.zeros_like(w)
    with torch.no_grad():
        for i in range(w.numel()):
            o = w[i].item()
            w[i] = o + 1e-4
            up = loss().item()
            w[i] = o - 1e-4
            num[i] = (up - loss().item()) / 2e-4
            w[i] = o
    assert (grad.view(-1) - num).norm() / num.norm() < 1e-4


# -- entity encoding --------------------------------------------------------------------------

def _tiny_battle(n_vehicles):
    infos = [make_info(i, i % 2, "medium") for i in range(n_vehicles)]
    tracks = {i: [(100 + 50 * i, 200, 3, 0.1), (120 + 50 * i, 200, 3, 0.1)]
              for i in range(n_vehicles)}
    return make_battle(tracks, infos)


def _model_for(examples, ablation="full"):
    vocab = build_vocab(examples, VEHICLE_TOKENS, GLOBAL_TOKENS)
    cards = {f: vocab.cardinality(f) for f in VEHICLE_TOKENS + GLOBAL_TOKENS}
    model = EndpointPredictor(ModelConfig(in_channels=6, base_width=4, depth=2, embed_dim=8,
                                          heads=2, ablation=ablation, cardinalities=cards))
    return model.eval(), vocab


def test_target_only_state_has_empty_context():
    geo = GridGeometry(1000.0, 32, 32)
    ex = build_example(_tiny_battle(1), 0, 1, 0, geo, KernelSpec.for_geometry(geo))
    assert ex.context == []
    model, vocab = _model_for([ex])
    _, _, Z, mask = encode_entities(model, collate([ex], vocab))
    assert Z.shape == (1, 0, 8) and mask.shape == (1, 0)
    logits, weights = model(collate([ex], vocab))
    assert logits.shape == (1, 32, 32) and weights.shape == (1, 0)


def test_identical_context_vehicles_share_embeddings():
    infos = [make_info(0, 0, "heavy"), make_info(1, 1, "light", name="twin"),
             make_info(2, 1, "light", name="twin")]
    tracks = {0: [(500, 500, 0, 0)] * 2, 1: [(200, 800, 2, 1.0)] * 2, 2: [(200, 800, 2, 1.0)] * 2}
    b = make_battle(tracks, infos)
    geo = GridGeometry(1000.0, 32, 32)
    ex = build_example(b, 0, 1, 0, geo, KernelSpec.for_geometry(geo))
    model, vocab = _model_for([ex])
    _, _, Z, _ = encode_entities(model, collate([ex], vocab))
    assert torch.equal(Z[0, 0], Z[0, 1])


def test_rating_and_battles_round_up():
    assert round_up_hundred(1234) == 1300 and round_up_hundred(567) == 600
    assert round_up_hundred(1300) == 1300
