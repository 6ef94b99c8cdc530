import math

import numpy as np
import pytest
import torch
from scipy.special import erf

from afformer.decoder import (
    Decoder,
    DecoderConfig,
    DecoderState,
    MultiHeadAttention,
    TemporalPyramid,
    TemporalPyramidConfig,
    decomposed_relpos,
    flatten,
    key_token_counts,
    temporal_length,
    up_nearest,
    video_tokens,
)
from afformer.encoder import FeaturePyramid


@pytest.fixture(autouse=True)
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed))


def np_(t):
    return t.detach().numpy()


# ---------------------------------------------------------------------------
# numpy oracles


def softmax_rows(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def linear(lin, x):
    return x @ np_(lin.weight).T + np_(lin.bias)


def layer_norm(ln, x):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * np_(ln.weight) + np_(ln.bias)


def relpos_brute(query_hw, key_thw, q, r_h, r_w):
    """Enumerate every (query, key) pair; offsets in units of the finer grid, rounded half-down."""
    hq, wq = query_hw
    t, hk, wk = key_thw
    out = np.zeros((hq * wq, t * hk * wk))
    ext_h = (r_h.shape[0] + 1) // 2
    ext_w = (r_w.shape[0] + 1) // 2
    for qi in range(hq * wq):
        yq, xq = divmod(qi, wq)
        for ki in range(t * hk * wk):
            _, rem = divmod(ki, hk * wk)
            yk, xk = divmod(rem, wk)
            dy = yq * max(hk / hq, 1) - yk * max(hq / hk, 1)
            dx = xq * max(wk / wq, 1) - xk * max(wq / wk, 1)
            dy, dx = math.ceil(dy - 0.5), math.ceil(dx - 0.5)
            out[qi, ki] = q[qi] @ r_h[dy + ext_h - 1] + q[qi] @ r_w[dx + ext_w - 1]
    return out


def attention_oracle(mha, xq, xk, query_hw=None, key_thw=None):
    """Per-head softmax(q k^T / sqrt(d) + R) v, concatenated, then the output map."""
    q, k, v = linear(mha.q_proj, xq), linear(mha.k_proj, xk), linear(mha.v_proj, xk)
    d = mha.head_dim
    heads = []
    for h in range(mha.heads):
        sl = slice(h * d, (h + 1) * d)
        logits = q[:, sl] @ k[:, sl].T / math.sqrt(d)
        if mha.rel_pos_h is not None and query_hw is not None:
            logits = logits + relpos_brute(query_hw, key_thw, q[:, sl], np_(mha.rel_pos_h), np_(mha.rel_pos_w))
        heads.append(softmax_rows(logits) @ v[:, sl])
    return linear(mha.out_proj, np.concatenate(heads, axis=1))


def block_oracle(block, x, video, query_hw, key_thw, up=None):
    s = layer_norm(block.norm_sa, x)
    if up is not None:
        s = s + up
    x = x + attention_oracle(block.msa, s, s)
    kv = layer_norm(block.norm_kv, video)
    x = x + attention_oracle(block.mca, layer_norm(block.norm_ca, x), kv, query_hw, key_thw)
    h = linear(block.mlp.fc1, layer_norm(block.norm_mlp, x))
    h = 0.5 * h * (1 + erf(h / math.sqrt(2)))
    return x + linear(block.mlp.fc2, h)


# ---------------------------------------------------------------------------
# attention


def test_mca_matches_hand_expanded_oracle():
    torch.manual_seed(1)
    mha = MultiHeadAttention(4, 1)
    xq, xk = rand(1, 2, 4, seed=1), rand(1, 3, 4, seed=2)
    got = np_(mha(xq, xk))[0]
    q = linear(mha.q_proj, np_(xq)[0])
    k = linear(mha.k_proj, np_(xk)[0])
    v = linear(mha.v_proj, np_(xk)[0])
    expected = np.zeros((2, 4))
    for i in range(2):
        scores = [sum(q[i, c] * k[j, c] for c in range(4)) / 2.0 for j in range(3)]
        m = max(scores)
        w = [math.exp(s - m) for s in scores]
        z = sum(w)
        ctx = [sum(w[j] / z * v[j, c] for j in range(3)) for c in range(4)]
        expected[i] = linear(mha.out_proj, np.array(ctx))
    np.testing.assert_allclose(got, expected, atol=1e-6, rtol=0)


def test_msa_matches_oracle_two_heads():
    torch.manual_seed(2)
    mha = MultiHeadAttention(8, 2)
    x = rand(1, 4, 8, seed=3)
    np.testing.assert_allclose(np_(mha(x, x))[0], attention_oracle(mha, np_(x)[0], np_(x)[0]), atol=1e-6, rtol=0)


def test_single_key_gives_value_map_for_any_query():
    torch.manual_seed(3)
    mha = MultiHeadAttention(8, 2)
    key = rand(1, 1, 8, seed=4)
    out = mha(rand(1, 5, 8, seed=5), key)
    expected = linear(mha.out_proj, linear(mha.v_proj, np_(key)[0]))
    np.testing.assert_allclose(np_(out)[0], np.repeat(expected, 5, axis=0), atol=1e-12, rtol=0)


def test_msa_duplicate_tokens_give_identical_rows():
    torch.manual_seed(4)
    mha = MultiHeadAttention(8, 2)
    x = rand(1, 4, 8, seed=6)
    x[0, 2] = x[0, 0]
    out = mha(x, x)
    assert torch.equal(out[0, 0], out[0, 2])


def test_mca_key_permutation_invariance():
    torch.manual_seed(5)
    mha = MultiHeadAttention(16, 4)
    xq, xk = rand(2, 6, 16, seed=7), rand(2, 11, 16, seed=8)
    perm = torch.randperm(11, generator=torch.Generator().manual_seed(0))
    a = mha(xq, xk)
    b = mha(xq, xk[:, perm])
    torch.testing.assert_close(a, b, atol=1e-12, rtol=0)


def test_mca_length_mismatch():
    mha = MultiHeadAttention(4, 1)
    with pytest.raises(ValueError, match="key length"):
        mha(rand(1, 2, 4), rand(1, 3, 4), rand(1, 4, 4))


def test_attention_rows_sum_to_one():
    torch.manual_seed(6)
    mha = MultiHeadAttention(16, 2, rel_pos_extent=4)
    mha.record_attention = True
    mha(rand(2, 16, 16), rand(2, 2 * 4, 16, seed=1), query_hw=(4, 4), key_thw=(2, 2, 2))
    sums = mha.last_attention.sum(-1)
    assert torch.all((sums - 1).abs() <= 1e-6)


# ---------------------------------------------------------------------------
# relative positions


def test_relpos_zero_tables():
    q = rand(4, 3)
    z = torch.zeros(3, 3)
    assert torch.count_nonzero(decomposed_relpos((2, 2), (1, 2, 2), q, z, z)) == 0


def test_relpos_single_cell_uses_center_entry():
    q = rand(1, 3)
    r_h, r_w = rand(3, 3, seed=1), rand(3, 3, seed=2)
    got = decomposed_relpos((1, 1), (1, 1, 1), q, r_h, r_w)
    torch.testing.assert_close(got, (q @ r_h[1] + q @ r_w[1]).reshape(1, 1))


@pytest.mark.parametrize("query_hw,key_thw", [((2, 2), (1, 2, 2)), ((4, 4), (2, 2, 2)), ((2, 4), (3, 4, 2)),
                                              ((3, 3), (1, 3, 3))])
def test_relpos_matches_brute_force(query_hw, key_thw):
    ext = max(query_hw[0], query_hw[1], key_thw[1], key_thw[2])
    d = 2 * ext - 1
    q = rand(query_hw[0] * query_hw[1], d, seed=3)
    r_h = torch.eye(d)  # one-hot rows
    r_w = 10 * torch.eye(d)
    got = decomposed_relpos(query_hw, key_thw, q, r_h, r_w)
    np.testing.assert_allclose(np_(got), relpos_brute(query_hw, key_thw, np_(q), np_(r_h), np_(r_w)), atol=1e-12)


def test_relpos_bias_repeats_across_frames():
    q = rand(4, 3)
    got = decomposed_relpos((2, 2), (3, 2, 2), q, rand(3, 3, seed=1), rand(3, 3, seed=2))
    assert torch.equal(got[:, :4], got[:, 4:8]) and torch.equal(got[:, :4], got[:, 8:])


def test_relpos_offset_out_of_range():
    with pytest.raises(ValueError, match="outside table range"):
        decomposed_relpos((4, 4), (1, 4, 4), rand(16, 3), torch.zeros(3, 3), torch.zeros(3, 3))


# ---------------------------------------------------------------------------
# upsampling and temporal pyramid


def test_up_nearest_small_cases():
    one = torch.tensor([[[7.0]]])
    assert torch.equal(up_nearest(one, (1, 1), (2, 2)), torch.full((1, 4, 1), 7.0))
    src = torch.arange(4.0).reshape(1, 4, 1)
    grid = up_nearest(src, (2, 2), (4, 4)).reshape(4, 4)
    assert grid.tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]


def test_up_nearest_index_oracle():
    src = rand(2, 15, 6)
    out = up_nearest(src, (3, 5), (6, 10))
    for i in range(6):
        for j in range(10):
            assert torch.equal(out[:, i * 10 + j], src[:, (i // 2) * 5 + j // 2])


def test_up_nearest_rejects_other_ratios():
    with pytest.raises(ValueError):
        up_nearest(rand(1, 4, 2), (2, 2), (6, 6))


def test_temporal_lengths_default_schedule():
    assert TemporalPyramidConfig().lengths(64, 3) == [64, 32, 16]
    assert TemporalPyramidConfig().lengths(1, 3) == [1, 1, 1]
    assert TemporalPyramidConfig().lengths(5, 3) == [5, 3, 2]


@pytest.mark.parametrize("t", [1, 2, 5, 8, 17])
def test_temporal_pyramid_conv_lengths(t):
    torch.manual_seed(0)
    tp = TemporalPyramid(4, 2)
    outs = tp(rand(1, t, 4, 3, 2))
    assert [o.shape[1] for o in outs] == [t, temporal_length(t, 1), temporal_length(t, 2)]
    assert all(o.shape[-2:] == (3, 2) for o in outs)


def test_pyramid_reduces_key_tokens():
    pyramid = sum(key_token_counts(64, (32, 32), TemporalPyramidConfig(), 3))
    flat = sum(key_token_counts(64, (32, 32), TemporalPyramidConfig(schedule=(0, 0, 0)), 3))
    assert pyramid < flat


def test_schedule_must_be_nonincreasing():
    with pytest.raises(ValueError):
        TemporalPyramidConfig(schedule=(1, 0))


# ---------------------------------------------------------------------------
# decoding


def make_decoder(levels=(2, 3), channels=8, heads=2, extent=4, seed=0, **kw):
    torch.manual_seed(seed)
    return Decoder(DecoderConfig(channels=channels, heads=heads, image_levels=levels,
                                 temporal=TemporalPyramidConfig(video_level=3), rel_pos_extent=extent, **kw))


def pyramids(c=8, t=4, seed=0):
    img = FeaturePyramid({2: rand(1, c, 4, 4, seed=seed), 3: rand(1, c, 2, 2, seed=seed + 1)})
    vid = FeaturePyramid({3: rand(1, t, c, 2, 2, seed=seed + 2)})
    return img, vid


def test_decode_single_tiny_vs_oracle():
    dec = make_decoder(levels=(2,), channels=4, heads=1, extent=2)
    e_img, e_vid = rand(1, 4, 2, 2, seed=1), rand(1, 1, 4, 2, 2, seed=2)
    state = dec.decode_single(e_img, e_vid)
    expected = block_oracle(dec.blocks_for(0)[0], np_(flatten(e_img))[0], np_(video_tokens(e_vid))[0],
                            (2, 2), (1, 2, 2))
    np.testing.assert_allclose(np_(state.tokens)[0], expected, atol=1e-6, rtol=0)


def test_decode_single_length_independent_of_video():
    dec = make_decoder()
    e_img = rand(1, 8, 4, 4)
    for t in (1, 3, 7):
        assert dec.decode_single(e_img, rand(1, t, 8, 2, 2)).tokens.shape == (1, 16, 8)


def test_zero_output_maps_make_decoding_identity():
    dec = make_decoder(levels=(2, 3))
    dec.zero_output_maps()
    img, vid = pyramids()
    state = dec.decode_multi(img, vid)
    assert torch.equal(state.tokens, flatten(img[2]))
    assert state.level == 2 and state.hw == (4, 4)


def test_single_level_multi_equals_single():
    dec = make_decoder(levels=(2,))
    img, vid = pyramids()
    a = dec.decode_multi(FeaturePyramid({2: img[2]}), vid)
    b = dec.decode_single(img[2], vid[3])
    assert torch.equal(a.tokens, b.tokens)


@pytest.mark.parametrize("share", [True, False])
def test_two_level_matches_unrolled(share):
    dec = make_decoder(levels=(2, 3), share_blocks=share)
    img, vid = pyramids(seed=4)
    got = dec.decode_multi(img, vid)
    coarse = dec._stage(0, img[3], vid[3], None, 3)
    up = up_nearest(coarse.tokens, coarse.hw, (4, 4))
    vid1 = dec.temporal.convs[0](vid[3].transpose(1, 2)).transpose(1, 2)
    block = dec.blocks_for(1)[0]
    fine = block_oracle(block, np_(flatten(img[2]))[0], np_(video_tokens(vid1))[0], (4, 4),
                        (vid1.shape[1], 2, 2), up=np_(up)[0])
    np.testing.assert_allclose(np_(got.tokens)[0], fine, atol=1e-6, rtol=0)
    coarse_oracle = block_oracle(dec.blocks_for(0)[0], np_(flatten(img[3]))[0], np_(video_tokens(vid[3]))[0],
                                 (2, 2), (4, 2, 2))
    np.testing.assert_allclose(np_(coarse.tokens)[0], coarse_oracle, atol=1e-6, rtol=0)


def test_missing_level_named():
    dec = make_decoder(levels=(2, 3))
    img, vid = pyramids()
    with pytest.raises(ValueError, match="level 3"):
        dec.decode_multi(FeaturePyramid({2: img[2]}), vid)


def test_channel_mismatch():
    dec = make_decoder()
    with pytest.raises(ValueError, match="channel mismatch"):
        dec.decode_single(rand(1, 6, 4, 4), rand(1, 2, 8, 2, 2))


def test_attention_dump(tmp_path):
    dec = make_decoder()
    dec.set_record_attention(True)
    img, vid = pyramids()
    dec.decode_multi(img, vid)
    for rec in dec.attention_maps:
        for kind in ("msa", "mca"):
            assert torch.all((rec[kind].sum(-1) - 1).abs() <= 1e-6)
    dec.dump_attention(tmp_path / "attn.npz")
    with np.load(tmp_path / "attn.npz") as z:
        assert sorted(z.files) == ["level2_block0_mca", "level2_block0_msa", "level3_block0_mca", "level3_block0_msa"]
        assert z["level2_block0_mca"].shape == (1, 2, 16, 2 * 4)


def test_state_length_checked():
    with pytest.raises(ValueError):
        DecoderState(torch.zeros(1, 5, 2), 2, (2, 2))
