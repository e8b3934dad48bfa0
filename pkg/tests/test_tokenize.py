import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from matey.diffmath import Parameter, Tensor
from matey.tokenize import (AdaptiveSpec, PatchEmbed, PatchSpec, PosAreaEmbed, Preprocessor, grid_layout,
                            mix_lengths_per_frame, patch_variance, select_frames, select_sts, sincos_features,
                            tokenize_adaptive, tokenize_uniform)


def _embeds(rng, p1=32, psts=16, c_in=3, c=8, dtype=np.float64):
    return (PatchEmbed(p1, c_in, c, rng, "c", dtype), PatchEmbed(psts, c_in, c, rng, "f", dtype),
            PosAreaEmbed(c, rng, dtype))


# ------------------------------------------------------------------ preprocess

def test_preprocess_identity_zero_and_oracle(rng):
    pre = Preprocessor(3, np.float64)
    pre.register("a", 3, rng)
    U = rng.standard_normal((2, 4, 4, 3))
    w, b = pre.maps["a"]
    w.data[:] = np.eye(3)
    np.testing.assert_array_equal(pre(Tensor(U), "a").data, U)
    w.data[:] = 0.0
    assert not pre(Tensor(U), "a").data.any()
    w.data[:] = rng.standard_normal((3, 3))
    b.data[:] = rng.standard_normal(3)
    out = pre(Tensor(U), "a").data
    for t in range(2):
        for i in range(4):
            for j in range(4):
                ref = [sum(U[t, i, j, c] * w.data[c, o] for c in range(3)) + b.data[o] for o in range(3)]
                np.testing.assert_allclose(out[t, i, j], ref, atol=1e-12)


def test_preprocess_errors(rng):
    pre = Preprocessor(4)
    pre.register("a", 2, rng)
    with pytest.raises(KeyError, match="'b'"):
        pre(Tensor(np.zeros((1, 2, 2, 2))), "b")
    with pytest.raises(ValueError, match="expects 2 channels"):
        pre(Tensor(np.zeros((1, 2, 2, 3))), "a")


# ------------------------------------------------------------------ variance and selection

def test_patch_variance_examples(rng):
    assert not patch_variance(np.full((8, 8, 2), 3.0), 4).any()
    u = np.array([[0.0, 0.0], [1.0, 1.0]])[..., None]
    assert patch_variance(u, 2)[0, 0] == pytest.approx(0.25)
    with pytest.raises(ValueError, match="divisible"):
        patch_variance(np.zeros((6, 8, 1)), 4)


def test_patch_variance_per_channel_means():
    # channel 0 constant 0, channel 1 constant 10: per-channel means give zero variance
    u = np.zeros((2, 2, 2))
    u[..., 1] = 10.0
    assert patch_variance(u, 2)[0, 0] == 0.0


@given(st.integers(0, 2**31), st.sampled_from([(2, 2), (4, 2), (2, 4)]))
def test_patch_variance_oracle(seed, p):
    u = np.random.default_rng(seed).standard_normal((8, 8, 3))
    np.testing.assert_allclose(patch_variance(u, p), oracles.patch_variance(u, *p), atol=1e-10)
    assert (patch_variance(u, p) >= 0).all()


def test_select_sts_examples():
    v = np.array([[1.0, 0.1], [0.5, 0.2]])
    sel = select_sts(v, 0.4)
    assert sel.sts_ids == ((0, 0), (1, 0))
    assert sel.n_sts == 2
    assert sel.kep_ids == ((0, 1), (1, 1))
    assert select_sts(v, 1.0).n_sts == 0
    assert select_sts(v, 0.0).n_sts == 4
    assert select_sts(np.zeros((2, 2)), 0.0).n_sts == 4
    assert select_sts(np.zeros((2, 2)), 0.3).n_sts == 0
    with pytest.raises(ValueError):
        select_sts(v, 1.5)


@given(st.integers(0, 2**31), st.floats(0, 1), st.floats(0, 1))
def test_selection_monotone_and_partition(seed, ga, gb):
    ga, gb = min(ga, gb), max(ga, gb)
    v = np.random.default_rng(seed).random((3, 4, 4))
    a, b = select_sts(v, ga), select_sts(v, gb)
    assert set(b.sts_ids) <= set(a.sts_ids)
    assert set(a.sts_ids).isdisjoint(a.kep_ids)
    assert len(a.sts_ids) + len(a.kep_ids) == 16
    assert list(a.sts_ids) == sorted(a.sts_ids)


def test_union_layout_and_per_frame_counts():
    v = np.zeros((2, 2, 2))
    v[0, 0, 0] = 1.0
    v[1, 1, 1] = 1.0
    sel = select_sts(v, 0.5)
    assert sel.sts_ids == ((0, 0), (1, 1))
    assert sel.n_sts_per_frame == (1, 1)
    assert mix_lengths_per_frame(sel, 4) == [3 + 4, 3 + 4]


# ------------------------------------------------------------------ embeddings

def test_patch_embed_shapes_and_sum_kernel(rng):
    emb = PatchEmbed(4, 1, 1, rng, "e", np.float64)
    emb.weight.data[:] = 1.0
    U = rng.standard_normal((2, 8, 12, 1))
    out = emb(Tensor(U)).data
    assert out.shape == (2, 2, 3, 1)
    for t in range(2):
        np.testing.assert_allclose(out[t, ..., 0], U[t, ..., 0].reshape(2, 4, 3, 4).sum(axis=(1, 3)))
        np.testing.assert_allclose(out[t], oracles.conv2d_patch(U[t], emb.weight.data), atol=1e-12)
    whole = PatchEmbed(8, 1, 5, rng, "w")
    assert whole(Tensor(np.zeros((3, 8, 8, 1), np.float32))).shape == (3, 1, 1, 5)
    with pytest.raises(ValueError):
        PatchSpec(4, 4).grid(10, 8)


def test_sincos_closed_form():
    C = 16
    f = sincos_features(np.array([[0.5, 0.5]]), C)[0]
    K = C // 4
    for k in range(K):
        w = math.pi * 128 ** (k / (K - 1))
        assert f[k] == pytest.approx(math.sin(0.5 * w))
        assert f[K + k] == pytest.approx(math.cos(0.5 * w))
        assert f[2 * K + k] == pytest.approx(math.sin(0.5 * w))
        assert f[3 * K + k] == pytest.approx(math.cos(0.5 * w))


def test_position_area_embed(rng):
    pe = PosAreaEmbed(8, rng, np.float64)
    centers = np.array([[0.25, 0.75], [0.25, 0.75]])
    same = pe(centers, np.array([-2.0, -2.0])).data
    np.testing.assert_array_equal(same[0], same[1])
    diff = pe(centers, np.array([np.log(1 / 4), np.log(1 / 16)])).data
    assert not np.allclose(diff[0], diff[1])
    with pytest.raises(ValueError):
        PosAreaEmbed(6, rng)


def test_grid_layout():
    centers, la = grid_layout(64, 64, 32, 32)
    np.testing.assert_allclose(centers, [[0.25, 0.25], [0.25, 0.75], [0.75, 0.25], [0.75, 0.75]])
    np.testing.assert_allclose(la, np.log(0.25))


# ------------------------------------------------------------------ adaptive token sets

def _mix(rng, gamma, U=None, mode="mix"):
    coarse, fine, pe = _embeds(rng)
    if U is None:
        U = rng.standard_normal((1, 2, 64, 64, 3))
    ts = tokenize_adaptive(Tensor(U), AdaptiveSpec(32, 16, gamma, mode), coarse, fine, pe)
    return ts, U, coarse, fine, pe


def test_mix_gamma_one_is_uniform_coarse(rng):
    ts, U, coarse, _, pe = _mix(rng, 1.0)
    uni = tokenize_uniform(Tensor(U), coarse, pe)
    assert ts.tokens.data.tobytes() == uni.tokens.data.tobytes()
    np.testing.assert_array_equal(ts.pos.data[0, 0], uni.pos.data[0, 0])
    assert ts.mask.all()


def test_mix_gamma_zero_length(rng):
    ts, *_ = _mix(rng, 0.0)
    assert ts.layout.S == (64 // 16) * (64 // 16)
    assert ts.mask.all()


def test_mix_length_matches_brute_force(rng):
    for _ in range(5):
        ts, U, *_ = _mix(rng, 0.5)
        # brute-force: loop variance oracle over every frame, union over frames
        picked = set()
        for t in range(U.shape[1]):
            v = oracles.patch_variance(U[0, t], 32, 32)
            picked |= {(i, j) for i in range(2) for j in range(2) if v[i, j] > 0.5 * v.max()}
        n = len(picked)
        assert ts.layout.seq_len[0] == (4 - n) + 4 * n
        assert int(ts.mask[0].sum()) == ts.tokens.shape[2] == (4 - n) + 4 * n


def test_mix_tokens_bit_identical_to_uniform(rng):
    ts, U, coarse, fine, pe = _mix(rng, 0.5)
    sel = ts.selections[0]
    uc = tokenize_uniform(Tensor(U), coarse, pe).tokens.data[0]    # [T, 4, C]
    uf = tokenize_uniform(Tensor(U), fine, pe).tokens.data[0]      # [T, 16, C]
    seq = ts.tokens.data[0]
    K = len(sel.kep_ids)
    for k, (i, j) in enumerate(sel.kep_ids):
        assert seq[:, k].tobytes() == uc[:, i * 2 + j].tobytes()
    for g, (i, j) in enumerate(sel.sts_ids):
        for a in range(2):
            for b in range(2):
                slot = (2 * i + a) * 4 + (2 * j + b)
                assert seq[:, K + g * 4 + a * 2 + b].tobytes() == uf[:, slot].tobytes()


def test_mix_padding_mask_across_batch(rng):
    U = rng.standard_normal((2, 1, 64, 64, 3)) * 0.01
    U[0, 0, :32, :32] *= 100.0      # one hot patch in sample 0 only
    ts, *_ = _mix(rng, 0.5, U)
    assert ts.layout.seq_len[0] == 7
    assert ts.mask.shape == (2, ts.layout.S)
    for b in range(2):
        L = ts.layout.seq_len[b]
        assert ts.mask[b, :L].all() and not ts.mask[b, L:].any()


def test_mul_groups_match_fine_tokens(rng):
    ts, U, _, fine, pe = _mix(rng, 0.3, mode="mul")
    uf = tokenize_uniform(Tensor(U), fine, pe).tokens.data[0]
    sel = ts.selections[0]
    assert ts.sts_tokens.shape[0] == sel.n_sts
    assert ts.tokens.shape[2] == 4
    for g, (i, j) in enumerate(sel.sts_ids):
        for a in range(2):
            for b in range(2):
                slot = (2 * i + a) * 4 + (2 * j + b)
                np.testing.assert_array_equal(ts.sts_tokens.data[g, :, a * 2 + b], uf[:, slot])


def test_adaptive_spec_errors():
    with pytest.raises(ValueError, match="divisible"):
        AdaptiveSpec(32, 12, 0.2)
    with pytest.raises(ValueError, match="gamma"):
        AdaptiveSpec(32, 16, -0.1)
    with pytest.raises(ValueError, match="mode"):
        AdaptiveSpec(32, 16, 0.2, "both")
    assert AdaptiveSpec((32, 16), (16, 8), 0.2).ratios == (2, 2)


def test_select_frames_matches_oracle(rng):
    U = rng.standard_normal((3, 16, 16, 2))
    sel = select_frames(U, 8, 0.4)
    for t in range(3):
        np.testing.assert_allclose(sel.variance[t], oracles.patch_variance(U[t], 8, 8), atol=1e-10)


def test_tokenize_accepts_parameters(rng):
    # tokens stay differentiable through the gather
    coarse, fine, pe = _embeds(rng)
    U = Parameter(rng.standard_normal((1, 1, 64, 64, 3)), "u")
    ts = tokenize_adaptive(U, AdaptiveSpec(32, 16, 0.5, "mix"), coarse, fine, pe)
    ts.tokens.sum().backward()
    assert U.grad is not None and np.abs(U.grad).sum() > 0
