from __future__ import annotations

import math

import numpy as np
import pytest

from oracles import dense_attention

from gsstyle.diffusion import (AttentionBlock, DDIMSchedule, Denoiser,
                               LatentState, StyleConditioning,
                               cross_view_attention, ddim_denoise, ddim_invert,
                               make_schedule, self_attention, style_embedding,
                               stylize_key_views)
from gsstyle.errors import NumericError, ValidationError


def test_schedule_single_step():
    sch = make_schedule(1, 0.75, 0.75)
    assert np.allclose(sch.alpha_bar, [1.0, 0.25])
    assert sch.T == 1


def test_schedule_strictly_decreasing_and_product():
    sch = make_schedule(50, 1e-4, 0.02)
    assert np.all(np.diff(sch.alpha_bar) < 0)
    betas = np.linspace(1e-4, 0.02, 50)
    expect = 1.0
    for b in betas:
        expect *= 1.0 - b
    assert abs(sch.alpha_bar[50] - expect) < 1e-12


def test_schedule_rejects_bad_ranges():
    with pytest.raises(ValidationError):
        make_schedule(0)
    with pytest.raises(ValidationError):
        make_schedule(10, 0.0, 0.02)
    with pytest.raises(ValidationError):
        make_schedule(10, 0.5, 0.2)


def test_invert_single_step_eps_zero():
    sch = DDIMSchedule(alpha_bar=np.array([1.0, 0.25]))
    zero = lambda z, t, c: np.zeros_like(z)
    z0 = np.full((2, 2, 3), 1.0)
    zT = ddim_invert(LatentState(z0, 0), zero, sch, StyleConditioning.null())
    assert np.allclose(zT.z, 0.5)
    back = ddim_denoise(zT, zero, sch, StyleConditioning.null())
    assert np.allclose(back.z, 1.0)


def test_invert_telescoping_identity():
    sch = make_schedule(20, 1e-3, 0.05)
    zero = lambda z, t, c: np.zeros_like(z)
    rng = np.random.default_rng(0)
    z0 = rng.uniform(size=(8, 8, 3))
    zT = ddim_invert(LatentState(z0, 0), zero, sch, StyleConditioning.null())
    assert np.max(np.abs(zT.z - math.sqrt(sch.alpha_bar[-1]) * z0)) < 1e-10


def test_constant_eps_roundtrip_exact():
    sch = make_schedule(30, 1e-3, 0.08)
    const = lambda z, t, c: np.full_like(z, 0.37)
    rng = np.random.default_rng(1)
    z0 = rng.uniform(size=(6, 6, 3))
    zT = ddim_invert(LatentState(z0, 0), const, sch, StyleConditioning.null())
    back = ddim_denoise(zT, const, sch, StyleConditioning.null())
    assert np.max(np.abs(back.z - z0)) < 1e-10


def test_step_inverse_with_recorded_eps():
    # the denoising recursion undoes the inversion recursion when both use
    # the same eps values, even state-dependent ones: record the eps
    # sequence during inversion, then replay it
    sch = make_schedule(12, 1e-3, 0.1)
    den = Denoiser(seed=5, cvsa_block="none")
    rng = np.random.default_rng(2)
    z0 = rng.uniform(size=(8, 8, 3))
    cond = StyleConditioning.null()
    recorded = {}

    def recording(z, t, c):
        recorded[t] = den(z, t, c)
        return recorded[t]

    zT = ddim_invert(LatentState(z0, 0), recording, sch, cond)
    replay = lambda z, t, c: recorded[t]
    back = ddim_denoise(zT, replay, sch, cond)
    assert np.max(np.abs(back.z - z0)) < 1e-10


def test_invert_requires_t0_and_denoise_requires_T():
    sch = make_schedule(5)
    zero = lambda z, t, c: np.zeros_like(z)
    with pytest.raises(ValidationError):
        ddim_invert(LatentState(np.zeros((2, 2, 3)), 1), zero, sch,
                    StyleConditioning.null())
    with pytest.raises(ValidationError):
        ddim_denoise(LatentState(np.zeros((2, 2, 3)), 3), zero, sch,
                     StyleConditioning.null())


def test_non_finite_latent_names_step():
    sch = make_schedule(4)
    bad = lambda z, t, c: np.full_like(z, np.inf if t == 2 else 0.0)
    with pytest.raises(NumericError, match="step 2"):
        ddim_invert(LatentState(np.zeros((2, 2, 3)), 0), bad, sch,
                    StyleConditioning.null())


def test_style_embedding_is_mean_plus_correlation():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(8, 8, 3))
    emb = style_embedding(img)
    assert emb.shape == (12,)
    assert np.allclose(emb[:3], img.reshape(-1, 3).mean(axis=0))
    corr = emb[3:].reshape(3, 3)
    assert np.allclose(corr, corr.T, atol=1e-12)
    assert np.allclose(np.diag(corr), 1.0, atol=1e-8)


# ---------------------------------------------------------------------------
# attention


def test_single_token_attention_is_value():
    rng = np.random.default_rng(4)
    blk = AttentionBlock.seeded(rng, 8, 8)
    z = rng.normal(size=(1, 8))
    assert np.allclose(self_attention(blk, z), z @ blk.wv, atol=1e-12)


def test_self_attention_matches_dense_oracle():
    rng = np.random.default_rng(5)
    blk = AttentionBlock.seeded(rng, 8, 6)
    z = rng.normal(size=(4, 8))
    assert np.max(np.abs(self_attention(blk, z)
                         - dense_attention(blk.wq, blk.wk, blk.wv, z, z))) < 1e-6


def test_cross_view_k1_bitwise_equals_self_attention():
    rng = np.random.default_rng(6)
    blk = AttentionBlock.seeded(rng, 8, 8)
    z = rng.normal(size=(5, 8))
    a = self_attention(blk, z)
    b = cross_view_attention(blk, z, np.concatenate([z], axis=0))
    assert np.array_equal(a, b)


def test_cross_view_duplicated_view_invariance():
    rng = np.random.default_rng(7)
    blk = AttentionBlock.seeded(rng, 8, 8)
    z = rng.normal(size=(5, 8))
    dup = cross_view_attention(blk, z, np.concatenate([z, z], axis=0))
    assert np.max(np.abs(dup - self_attention(blk, z))) < 1e-6


def test_cross_view_matches_dense_oracle_and_permutation():
    rng = np.random.default_rng(8)
    blk = AttentionBlock.seeded(rng, 8, 8)
    z = rng.normal(size=(4, 8))
    other = rng.normal(size=(6, 8))
    kv = np.concatenate([z, other], axis=0)
    out = cross_view_attention(blk, z, kv)
    assert np.max(np.abs(out - dense_attention(blk.wq, blk.wk, blk.wv, z, kv))) < 1e-6
    # permuting the key/value token set leaves the output unchanged
    perm = rng.permutation(len(kv))
    out_p = cross_view_attention(blk, z, kv[perm])
    assert np.max(np.abs(out - out_p)) < 1e-6


def test_attention_dimension_mismatch():
    rng = np.random.default_rng(9)
    blk = AttentionBlock.seeded(rng, 8, 8)
    with pytest.raises(ValidationError):
        self_attention(blk, rng.normal(size=(4, 5)))


# ---------------------------------------------------------------------------
# denoiser + stylization


def _views(n, h=16, w=16, seed=0):
    rng = np.random.default_rng(seed)
    renders = [rng.uniform(size=(h, w, 3)) for _ in range(n)]
    depths = [rng.uniform(1.0, 5.0, size=(h, w)) for _ in range(n)]
    return renders, depths


def test_denoiser_deterministic_and_shape():
    den = Denoiser(seed=3)
    rng = np.random.default_rng(10)
    z = rng.uniform(size=(16, 16, 3))
    cond = StyleConditioning.from_style(rng.uniform(size=(16, 16, 3)))
    a = den(z, 4, cond)
    b = Denoiser(seed=3)(z, 4, cond)
    assert a.shape == z.shape
    assert np.array_equal(a, b)


def test_denoiser_weights_independent_of_active_block():
    a = Denoiser(seed=3, cvsa_block="mid")
    b = Denoiser(seed=3, cvsa_block="dec2-last")
    assert np.array_equal(a.w_out[0], b.w_out[0])
    assert np.array_equal(a.attn["mid"].wq, b.attn["mid"].wq)


def test_stylize_zero_denoiser_is_identity():
    class Zero:
        cvsa_block = "none"

        def __call__(self, z, t, cond):
            return np.zeros_like(z)

    renders, depths = _views(2)
    sch = make_schedule(6)
    cond = StyleConditioning.null()
    outs = stylize_key_views(renders, depths, cond, Zero(), sch)
    for img, out in zip(renders, outs):
        assert np.max(np.abs(out - img)) < 1e-10


def test_stylize_identical_views_stay_identical():
    renders, depths = _views(1)
    renders = [renders[0], renders[0].copy()]
    depths = [depths[0], depths[0].copy()]
    den = Denoiser(seed=3, cvsa_block="dec2-last")
    sch = make_schedule(3)
    style = StyleConditioning.from_style(np.linspace(0, 1, 16 * 16 * 3).reshape(16, 16, 3))
    outs = stylize_key_views(renders, depths, style, den, sch)
    assert np.array_equal(outs[0], outs[1])


def test_stylize_deterministic():
    renders, depths = _views(2, seed=11)
    den = Denoiser(seed=3, cvsa_block="dec2-last")
    sch = make_schedule(3)
    style = StyleConditioning.from_style(np.full((16, 16, 3), 0.4))
    a = stylize_key_views(renders, depths, style, den, sch)
    b = stylize_key_views(renders, depths, style, den, sch)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_stylize_cvsa_none_equals_independent_runs():
    renders, depths = _views(3, seed=12)
    den = Denoiser(seed=3, cvsa_block="none")
    sch = make_schedule(4)
    style = StyleConditioning.from_style(np.full((16, 16, 3), 0.6))
    joint = stylize_key_views(renders, depths, style, den, sch)
    for i in range(3):
        single = stylize_key_views([renders[i]], [depths[i]], style, den, sch)
        assert np.array_equal(joint[i], single[0])


def test_stylize_rejects_mismatched_views():
    renders, depths = _views(2)
    den = Denoiser(seed=3)
    sch = make_schedule(2)
    with pytest.raises(ValidationError):
        stylize_key_views(renders, depths[:1], StyleConditioning.null(), den, sch)
    with pytest.raises(ValidationError):
        stylize_key_views([renders[0], renders[1][:8]], depths,
                          StyleConditioning.null(), den, sch)


def test_bad_cvsa_block_rejected():
    with pytest.raises(ValidationError):
        Denoiser(seed=0, cvsa_block="dec9")
