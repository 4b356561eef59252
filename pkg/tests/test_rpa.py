import numpy as np
import pytest
from scipy.special import erf

from rptsr import tensor as T
from rptsr.layers import TransformerBlock
from rptsr.model import set_pad_mode
from rptsr.rpa import (
    LocalTokenizer, PriorNotInitialized, RegionalPriorBank, RpaBlock, RpaLayer, bilinear_matrix,
    dyn_token_self_attention, fuse, local_tokens, prior_init_from, resample_prior, rpa_block,
    tokens_per_side, window_attention_with_dyn,
)
from rptsr.tensor import Tensor
from rptsr.training import AdamState, ParamGroup, adam_step
from rptsr.windowing import window_partition


def rng(seed=0):
    return np.random.default_rng(seed)


def perturb(module, g, scale=0.1):
    for p in module.parameters():
        p.data = p.data + g.standard_normal(p.shape) * scale


# --- local tokens ---------------------------------------------------------

def test_local_tokens_classical_shape():
    tok = LocalTokenizer(240, 120, rng())
    with T.no_grad():
        L = local_tokens(T.tensor(np.zeros((240, 128, 128))), tok, 8, 1)
    assert L.shape == (256, 120)


def test_local_tokens_constant_input_all_equal():
    tok = LocalTokenizer(6, 3, rng(1))
    dw = np.zeros((3, 1, 3, 3))
    dw[:, 0, 1, 1] = 1.0
    tok.dwconv.weight.data = dw
    L = local_tokens(T.tensor(np.full((6, 8, 8), 0.7)), tok, 4, 1).data
    np.testing.assert_allclose(L, np.broadcast_to(L[0], L.shape), rtol=0, atol=1e-15)


def test_local_token_j_summarizes_window_j():
    tok = LocalTokenizer(2, 2, rng(2))
    tok.proj.weight.data = np.eye(2)[:, :, None, None]
    tok.dwconv.weight.data = np.zeros((2, 1, 3, 3))
    tok.dwconv.weight.data[:, 0, 1, 1] = 1.0
    f = rng(3).standard_normal((2, 8, 12))
    L = local_tokens(T.tensor(f), tok, 4, 1).data
    for r in range(2):
        for c in range(3):
            np.testing.assert_allclose(L[r * 3 + c], f[:, 4 * r:4 * r + 4, 4 * c:4 * c + 4].mean(axis=(1, 2)))


def test_local_tokens_k4_grid_ordering():
    assert tokens_per_side(4, 8) == 2
    with pytest.raises(ValueError):
        tokens_per_side(2, 8)
    tok = LocalTokenizer(1, 1, rng(4))
    tok.proj.weight.data = np.ones((1, 1, 1, 1))
    tok.dwconv.weight.data = np.zeros((1, 1, 3, 3))
    tok.dwconv.weight.data[0, 0, 1, 1] = 1.0
    f = np.arange(64.0).reshape(1, 8, 8)
    L = local_tokens(T.tensor(f), tok, 4, 4).data[:, 0]
    # window 0 (top-left) owns tokens 0..3, each a 2×2 mean inside it
    np.testing.assert_allclose(L[:4], [f[0, 0:2, 0:2].mean(), f[0, 0:2, 2:4].mean(),
                                       f[0, 2:4, 0:2].mean(), f[0, 2:4, 2:4].mean()])
    np.testing.assert_allclose(L[4], f[0, 0:2, 4:6].mean())


def test_local_tokens_gradient():
    from rptsr.gradcheck import check_graph
    g = rng(5)
    tok = LocalTokenizer(4, 2, g)
    x = Tensor(g.standard_normal((4, 4, 4)), requires_grad=True)
    err = check_graph(lambda: T.sum_(local_tokens(x, tok, 2, 1)), [x] + tok.parameters(), g, max_coords=20)
    assert err < 1e-6


# --- prior bank -----------------------------------------------------------

def test_prior_init_copies_single_sample():
    bank = RegionalPriorBank(3, 1)
    L = rng(6).standard_normal((1, 4, 3))
    prior_init_from(bank, L, 2, 2)
    assert bank.initialized and bank.train_extents == (2, 2)
    np.testing.assert_array_equal(bank.prior.data, L[0])


def test_prior_init_mean_of_opposites_is_zero():
    bank = RegionalPriorBank(3, 1)
    L = rng(7).standard_normal((4, 3))
    prior_init_from(bank, np.stack([L, -L]), 2, 2)
    np.testing.assert_array_equal(bank.prior.data, np.zeros((4, 3)))


def test_prior_init_is_idempotent():
    bank = RegionalPriorBank(3, 1)
    prior_init_from(bank, rng(8).standard_normal((4, 3)), 2, 2)
    before = bank.prior.data.copy()
    prior_init_from(bank, rng(9).standard_normal((4, 3)), 2, 2)
    np.testing.assert_array_equal(bank.prior.data, before)


def test_prior_init_extent_mismatch():
    bank = RegionalPriorBank(3, 1)
    bank.train_extents = (2, 2)
    with pytest.raises(ValueError, match="extents"):
        prior_init_from(bank, np.zeros((6, 3)), 2, 3)


def test_uninitialized_bank_errors():
    with pytest.raises(PriorNotInitialized):
        resample_prior(RegionalPriorBank(3, 1), 2, 2)


# --- fusion ---------------------------------------------------------------

def test_fuse_shape_and_halves():
    L = T.tensor(np.zeros((256, 120)))
    R = T.tensor(rng(10).standard_normal((256, 120)))
    D = fuse(L, R)
    assert D.shape == (256, 240)
    assert (D.data[:, :120] == 0).all()
    a, b = T.split_lastdim(D, 120)
    np.testing.assert_array_equal(a.data, L.data)
    np.testing.assert_array_equal(b.data, R.data)


def test_fuse_row_mismatch():
    with pytest.raises(ValueError, match="rows"):
        fuse(T.tensor(np.zeros((4, 2))), T.tensor(np.zeros((5, 2))))


# --- resampling -----------------------------------------------------------

def test_resample_same_extents_returns_bank_verbatim():
    bank = RegionalPriorBank(2, 1)
    bank.load(rng(11).standard_normal((6, 2)), 2, 3)
    assert resample_prior(bank, 2, 3) is bank.prior


@pytest.mark.parametrize("rows,cols", [(1, 1), (3, 5), (4, 2)])
def test_resample_constant(rows, cols):
    bank = RegionalPriorBank(2, 1)
    bank.load(np.full((6, 2), 0.3), 2, 3)
    np.testing.assert_allclose(resample_prior(bank, rows, cols).data, 0.3, atol=1e-15)


def test_resample_bilinear_midpoint():
    bank = RegionalPriorBank(1, 1)
    vals = np.array([[1.0], [2.0], [4.0], [8.0]])
    bank.load(vals, 2, 2)
    out = resample_prior(bank, 3, 3).data
    assert out[4, 0] == pytest.approx(vals.mean())
    assert out[0, 0] == 1.0 and out[8, 0] == 8.0


def test_bilinear_rows_sum_to_one():
    for n_in, n_out in [(2, 3), (5, 2), (4, 9)]:
        np.testing.assert_allclose(bilinear_matrix(n_in, n_out).sum(axis=1), 1.0)


# --- attention stages -----------------------------------------------------

def test_dyn_attention_single_token():
    block = TransformerBlock(4, 2, rng(12))
    perturb(block, rng(13))
    d = T.tensor(rng(14).standard_normal((1, 4)))
    out, attn = dyn_token_self_attention(d, block)
    assert (attn == 1.0).all()
    ln1 = T.layer_norm(d, block.norm1.gamma, block.norm1.beta)
    v = (ln1.data @ block.attn.qkv.weight.data + block.attn.qkv.bias.data)[:, 8:]
    y = d.data + v @ block.attn.proj.weight.data + block.attn.proj.bias.data
    ln2 = T.layer_norm(T.tensor(y), block.norm2.gamma, block.norm2.beta).data
    h = ln2 @ block.mlp.fc1.weight.data + block.mlp.fc1.bias.data
    h = h * 0.5 * (1 + erf(h / np.sqrt(2)))
    expected = y + h @ block.mlp.fc2.weight.data + block.mlp.fc2.bias.data
    np.testing.assert_allclose(out.data, expected, rtol=1e-12, atol=1e-14)


def test_dyn_attention_identical_tokens():
    block = TransformerBlock(4, 2, rng(15))
    perturb(block, rng(16))
    d = T.tensor(np.tile(rng(17).standard_normal((1, 4)), (5, 1)))
    out, _ = dyn_token_self_attention(d, block)
    np.testing.assert_allclose(out.data, np.broadcast_to(out.data[0], out.shape), rtol=1e-13)


def test_window_sequence_length_65():
    block = TransformerBlock(8, 2, rng(18))
    g = window_partition(T.tensor(rng(19).standard_normal((8, 16, 16))), 8)
    dstar = T.tensor(rng(20).standard_normal((4, 8)))
    out, attn = window_attention_with_dyn(g, dstar, block, keep_attn=True)
    assert attn.shape == (4, 2, 65, 65)
    assert out.tokens.shape == (4, 64, 8)
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-12)


def test_window_attention_token_count_mismatch():
    block = TransformerBlock(8, 2, rng(21))
    g = window_partition(T.tensor(np.zeros((8, 16, 16))), 8)
    with pytest.raises(ValueError):
        window_attention_with_dyn(g, T.tensor(np.zeros((5, 8))), block)


def _reference_window_msa(x, block, eps=1e-5):
    """Plain window MSA in raw numpy: x (N_w, n, C)."""
    def ln(v, norm):
        mu = v.mean(axis=-1, keepdims=True)
        vc = v - mu
        var = (vc * vc).mean(axis=-1, keepdims=True)
        return vc * (1.0 / np.sqrt(var + eps)) * norm.gamma.data + norm.beta.data

    nw, n, c = x.shape
    h = block.attn.heads
    d = c // h
    qkv = np.matmul(ln(x, block.norm1), block.attn.qkv.weight.data) + block.attn.qkv.bias.data
    qkv = np.ascontiguousarray(qkv.reshape(nw, n, 3, h, d).transpose(2, 0, 3, 1, 4))
    q, k, v = qkv[0].copy(), qkv[1].copy(), qkv[2].copy()
    s = np.matmul(q * d ** -0.5, np.ascontiguousarray(k.transpose(0, 1, 3, 2)))
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    a = e / e.sum(axis=-1, keepdims=True)
    o = np.ascontiguousarray(np.matmul(a, v).transpose(0, 2, 1, 3)).reshape(nw, n, c)
    y = x + (np.matmul(o, block.attn.proj.weight.data) + block.attn.proj.bias.data)
    z = np.matmul(ln(y, block.norm2), block.mlp.fc1.weight.data) + block.mlp.fc1.bias.data
    z = z * (0.5 * (1.0 + erf(z / np.sqrt(2.0))))
    return y + (np.matmul(z, block.mlp.fc2.weight.data) + block.mlp.fc2.bias.data)


@pytest.mark.parametrize("seed", range(3))
def test_k0_reduces_to_plain_window_msa_bitwise(seed):
    g = rng(seed)
    block = TransformerBlock(8, 2, g)
    perturb(block, g)
    grid = window_partition(T.tensor(g.standard_normal((8, 8, 16))), 4)
    out, _ = window_attention_with_dyn(grid, None, block)
    ref = _reference_window_msa(grid.tokens.data, block)
    np.testing.assert_array_equal(out.tokens.data, ref)


# --- cost identity --------------------------------------------------------

@pytest.mark.parametrize("k", [0, 1, 2, 4])
def test_attention_core_multiplies(k):
    c, w = 16, 8
    block = TransformerBlock(c, 2, rng(22))
    g = window_partition(T.tensor(rng(23).standard_normal((c, 8, 8))), w)
    dstar = T.tensor(rng(24).standard_normal((k, c))) if k else None
    with T.count_macs() as counter:
        window_attention_with_dyn(g, dstar, block)
    n = k + w * w
    assert counter["attn_core"] == 2 * n * n * c
    assert counter["attn_core"] - 2 * w ** 4 * c == 2 * c * (2 * k * w * w + k * k)


# --- full layer -----------------------------------------------------------

@pytest.mark.parametrize("variant", ["baseline", "static", "rpt"])
def test_layer_shape_and_token_count(variant):
    layer = RpaLayer(8, 2, 4, 1, variant, rng(25))
    f = T.tensor(rng(26).standard_normal((2, 8, 12, 8)))
    out = layer(f, init_priors=True)
    assert out.shape == f.shape
    if layer.bank is not None:
        assert layer.bank.prior.shape[0] == 1 * 12 * 8 // 16


def test_layer_classical_shape():
    layer = RpaLayer(240, 6, 8, 1, "rpt", rng(27))
    with T.no_grad():
        out = layer(T.tensor(rng(28).standard_normal((240, 128, 128)) * 0.1), init_priors=True)
    assert out.shape == (240, 128, 128)


def test_layer_uninitialized_prior_errors():
    layer = RpaLayer(8, 2, 4, 1, "rpt", rng(29))
    with pytest.raises(PriorNotInitialized):
        layer(T.tensor(np.zeros((8, 8, 8))))


def test_layer_rejects_odd_channels_in_rpt():
    with pytest.raises(ValueError):
        RpaLayer(5, 5, 4, 1, "rpt", rng(30))


def _equivariance_gap(layer, f, w):
    shifted = T.tensor(np.roll(f, (w, w), axis=(-2, -1)))
    with T.no_grad():
        a = np.roll(layer(T.tensor(f)).data, (w, w), axis=(-2, -1))
        b = layer(shifted).data
    return np.abs(a - b).max()


def test_baseline_layer_commutes_with_window_shift():
    for seed in range(5):
        g = rng(seed)
        layer = RpaLayer(8, 2, 4, 1, "baseline", g, pad_mode="circular")
        perturb(layer, g)
        assert _equivariance_gap(layer, g.standard_normal((8, 16, 12)), 4) < 1e-5


def test_rpt_layer_with_random_prior_breaks_shift_equivariance():
    gaps = []
    for seed in range(5):
        g = rng(seed)
        layer = RpaLayer(8, 2, 4, 1, "rpt", g)
        set_pad_mode(layer, "circular")
        f = g.standard_normal((8, 16, 12))
        layer(T.tensor(f), init_priors=True)
        layer.bank.prior.data = g.standard_normal(layer.bank.prior.shape)
        perturb(layer, g)
        gaps.append(_equivariance_gap(layer, f, 4))
    assert max(gaps) > 1e-3


# --- block ----------------------------------------------------------------

def test_block_outer_residual_with_zero_body():
    f = T.tensor(rng(31).standard_normal((4, 8, 8)))
    out = rpa_block(f, [lambda x, init=False: T.scale(x, 0.0)])
    np.testing.assert_array_equal(out.data, f.data)


def test_block_zeroed_layers_are_identity_residuals():
    layers = [RpaLayer(4, 2, 2, 1, "rpt", rng(32)) for _ in range(2)]
    f = T.tensor(rng(33).standard_normal((4, 4, 4)))
    block = RpaBlock(layers)
    block(f, init_priors=True)
    for p in block.parameters():
        p.data = np.zeros_like(p.data)
    np.testing.assert_array_equal(block(f).data, 2 * f.data)


def test_block_gradient_reaches_input_through_skip_and_body():
    g = rng(34)
    layers = [RpaLayer(4, 2, 2, 1, "rpt", g) for _ in range(2)]
    f0 = g.standard_normal((4, 4, 4))
    block = RpaBlock(layers)
    block(T.tensor(f0), init_priors=True)
    perturb(block, g)
    proj = g.standard_normal(f0.shape)
    x = Tensor(f0, requires_grad=True)
    T.backward(T.sum_(T.mul(block(x), T.tensor(proj))))
    x_body = Tensor(f0, requires_grad=True)
    out = x_body
    for l in layers:
        out = l(out)
    T.backward(T.sum_(T.mul(out, T.tensor(proj))))
    np.testing.assert_allclose(x.grad - x_body.grad, proj, atol=1e-12)
    from rptsr.gradcheck import finite_diff_grad, rel_error

    def f(arr):
        with T.no_grad():
            return float((block(T.tensor(arr)).data * proj).sum())
    assert rel_error(x.grad, finite_diff_grad(f, f0)) < 1e-6


def test_block_classical_four_layers_runs():
    g = rng(35)
    block = RpaBlock([RpaLayer(240, 6, 8, 1, "rpt", g) for _ in range(4)])
    with T.no_grad():
        out = block(T.tensor(g.standard_normal((240, 64, 64)) * 0.1), init_priors=True)
    assert out.shape == (240, 64, 64)


# --- prior persistence and distinctness -----------------------------------

def test_prior_unchanged_by_forward_changed_by_step():
    g = rng(36)
    layer = RpaLayer(4, 2, 2, 1, "rpt", g)
    layer(T.tensor(g.standard_normal((4, 4, 4))), init_priors=True)
    before = layer.bank.prior.data.copy()
    for _ in range(2):
        layer(T.tensor(g.standard_normal((4, 4, 4))))
    np.testing.assert_array_equal(layer.bank.prior.data, before)
    layer.zero_grad()
    T.backward(T.sum_(T.mul(layer(T.tensor(g.standard_normal((4, 4, 4)))), T.tensor(g.standard_normal((4, 4, 4))))))
    assert np.abs(layer.bank.prior.grad).max() > 0
    adam_step([ParamGroup(list(layer.named_parameters()), 1.0)], AdamState(), 1e-3)
    assert not np.array_equal(layer.bank.prior.data, before)


def test_layer_banks_are_distinct():
    g = rng(37)
    a, b = RpaLayer(4, 2, 2, 1, "rpt", g), RpaLayer(4, 2, 2, 1, "rpt", g)
    f = T.tensor(g.standard_normal((4, 4, 4)))
    a(f, init_priors=True)
    b(f, init_priors=True)
    assert a.bank.prior is not b.bank.prior
    before = b(f).data.copy()
    a.bank.prior.data = a.bank.prior.data + 5.0
    np.testing.assert_array_equal(b(f).data, before)
