import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dawm.diffusion import (Denoiser, DenoiserSpec, DiffusionConfig, GuidanceConfig, NoiseSchedule, SegmentCoder,
                            WorldModel, cfg_epsilon, draw_training_noise, forward_noising, noise_prediction_loss,
                            posterior_coefficients, reverse_diffusion, strided_steps, timestep_embedding,
                            train_world_model)
from dawm.nn import ShapeError, gradient_check

SCHED = NoiseSchedule.cosine(5)


def tiny_denoiser(rng, d_s=3, d_a=2, H=3, perturb=0.3, **kw):
    spec = DenoiserSpec(H, d_s, d_a, width=8, n_blocks=2, emb_dim=8, **kw)
    den = Denoiser(spec, rng)
    for v in den.store.params.values():
        v += rng.normal(scale=perturb, size=v.shape)
    return den


def cond_batch(rng, B, d_s=3, d_a=2):
    return rng.normal(size=(B, d_s)), rng.uniform(-1, 1, (B, d_a)), rng.normal(size=B)


# -- schedule ---------------------------------------------------------------

def test_cosine_schedule_matches_closed_form():
    K, s = 5, 0.008
    f = [math.cos(((k / K) + s) / (1 + s) * math.pi / 2) ** 2 for k in range(K + 1)]
    ab = [x / f[0] for x in f]
    expected = [1.0] + [ab[k] for k in range(1, K)]
    np.testing.assert_allclose(SCHED.alpha_bars[:K], expected, rtol=1e-12)
    # the last beta is clipped at 0.999
    assert SCHED.betas[-1] == pytest.approx(0.999)


@given(st.integers(1, 50))
def test_alpha_bar_monotone(K):
    ab = NoiseSchedule.cosine(K).alpha_bars
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0) and ab[-1] > 0


def test_schedule_rejects_bad_betas():
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.1, 1.0]))
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([]))


# -- forward noising --------------------------------------------------------

@given(arrays(np.float64, (4, 3), elements=st.floats(-5, 5)), st.integers(1, 5))
def test_forward_noising_zero_noise(x0, k):
    out = forward_noising(x0, k, np.zeros_like(x0), SCHED)
    np.testing.assert_allclose(out, math.sqrt(SCHED.alpha_bars[k]) * x0, atol=1e-12, rtol=0)


def test_forward_noising_formula_per_row(rng):
    x0 = rng.normal(size=(6, 4, 2))
    eps = rng.normal(size=x0.shape)
    k = np.array([1, 2, 3, 4, 5, 1])
    out = forward_noising(x0, k, eps, SCHED)
    for i in range(6):
        ab = SCHED.alpha_bars[k[i]]
        np.testing.assert_allclose(out[i], math.sqrt(ab) * x0[i] + math.sqrt(1 - ab) * eps[i], atol=1e-12, rtol=0)


def test_forward_noising_errors(rng):
    x0 = rng.normal(size=(2, 3))
    with pytest.raises(ValueError):
        forward_noising(x0, 0, x0, SCHED)
    with pytest.raises(ValueError):
        forward_noising(x0, 6, x0, SCHED)
    with pytest.raises(ShapeError):
        forward_noising(x0, 1, np.zeros((2, 4)), SCHED)


# -- step subsets and posterior ---------------------------------------------

def test_strided_steps_default():
    assert strided_steps(5, 3) == [5, 3, 1]
    assert strided_steps(5, 5) == [5, 4, 3, 2, 1]
    assert strided_steps(5, 1) == [5]
    with pytest.raises(ValueError):
        strided_steps(5, 6)


@given(st.integers(2, 40).flatmap(lambda K: st.tuples(st.just(K), st.integers(2, K))))
def test_strided_steps_properties(kn):
    K, N = kn
    s = strided_steps(K, N)
    assert len(s) == N and s[0] == K and s[-1] == 1
    assert all(a > b for a, b in zip(s, s[1:]))


def gaussian_posterior(ab_t, ab_s):
    """Condition the joint Gaussian of (x_s, x_t) given x0 on x_t."""
    cov = math.sqrt(ab_t / ab_s) * (1 - ab_s)
    var_t = 1 - ab_t
    ct = cov / var_t
    c0 = math.sqrt(ab_s) - ct * math.sqrt(ab_t)
    var = (1 - ab_s) - cov * cov / var_t
    return c0, ct, var


@given(st.integers(2, 5).flatmap(lambda t: st.tuples(st.just(t), st.integers(1, t - 1))))
def test_posterior_matches_gaussian_conditioning(ts):
    t, s = ts
    ab = SCHED.alpha_bars
    got = posterior_coefficients(SCHED, t, s)
    np.testing.assert_allclose(got, gaussian_posterior(ab[t], ab[s]), rtol=1e-10, atol=1e-14)


def test_adjacent_posterior_is_ddpm():
    ab, b, a = SCHED.alpha_bars, SCHED.betas, SCHED.alphas
    for t in range(2, 6):
        c0, ct, var = posterior_coefficients(SCHED, t, t - 1)
        assert c0 == pytest.approx(math.sqrt(ab[t - 1]) * b[t - 1] / (1 - ab[t]), rel=1e-12)
        assert ct == pytest.approx(math.sqrt(a[t - 1]) * (1 - ab[t - 1]) / (1 - ab[t]), rel=1e-12)
        assert var == pytest.approx((1 - ab[t - 1]) / (1 - ab[t]) * b[t - 1], rel=1e-12)


# -- denoiser ---------------------------------------------------------------

def test_timestep_embedding_shape_and_range():
    e = timestep_embedding(np.arange(1, 6), 8)
    assert e.shape == (5, 8) and np.all(np.abs(e) <= 1)
    np.testing.assert_allclose(e[:, :4] ** 2 + e[:, 4:] ** 2, 1.0, atol=1e-12)


def test_fresh_denoiser_outputs_zero(rng):
    den = Denoiser(DenoiserSpec(3, 3, 2, width=8, n_blocks=1, emb_dim=8), rng)
    s, a, g = cond_batch(rng, 4)
    out = den.forward(rng.normal(size=(4, 4, 4)), np.full(4, 2), s, a, g, np.zeros(4))
    assert np.all(out == 0)


def test_loss_oracle_for_zero_predictor(rng):
    den = Denoiser(DenoiserSpec(3, 3, 2, width=8, n_blocks=1, emb_dim=8), rng)
    s, a, g = cond_batch(rng, 5)
    batch = {"x0": rng.normal(size=(5, 4, 4)), "state": s, "action": a, "rtg": g}
    k, eps, null = draw_training_noise(rng, 5, (4, 4), 5, 0.25)
    loss = noise_prediction_loss(den, SCHED, batch, k, eps, null, backward=False)
    assert loss == pytest.approx(np.sum(eps ** 2) / 5, rel=1e-12)


@pytest.mark.parametrize("positional,film", [(True, True), (False, False), (True, False)])
def test_denoiser_gradients(positional, film, rng):
    den = tiny_denoiser(rng, positional_cond=positional, film=film)
    s, a, g = cond_batch(rng, 6)
    batch = {"x0": rng.normal(size=(6, 4, 4)), "state": s, "action": a, "rtg": g}
    k, eps, _ = draw_training_noise(rng, 6, (4, 4), 5, 0.0)
    null = np.array([0, 1, 0, 1, 0, 0], dtype=bool)
    errs = gradient_check(lambda: noise_prediction_loss(den, SCHED, batch, k, eps, null),
                          lambda: noise_prediction_loss(den, SCHED, batch, k, eps, null, backward=False), den.store)
    assert max(errs.values()) < 1e-4, errs


def test_null_rows_ignore_condition(rng):
    den = tiny_denoiser(rng)
    x = rng.normal(size=(3, 4, 4))
    s, a, g = cond_batch(rng, 3)
    s2, a2, g2 = cond_batch(rng, 3)
    o1 = den.forward(x, np.full(3, 3), s, a, g, np.ones(3))
    o2 = den.forward(x, np.full(3, 3), s2, a2, g2, np.ones(3))
    np.testing.assert_array_equal(o1, o2)
    o3 = den.forward(x, np.full(3, 3), s2, a2, g2, np.zeros(3))
    assert not np.allclose(o1, o3)


def test_denoiser_shape_errors(rng):
    den = tiny_denoiser(rng)
    s, a, g = cond_batch(rng, 2)
    with pytest.raises(ShapeError):
        den.forward(np.zeros((2, 5, 4)), np.ones(2), s, a, g, np.zeros(2))
    with pytest.raises(ShapeError):
        den.forward(np.zeros((2, 4, 4)), np.ones(2), s[:, :2], a, g, np.zeros(2))


def test_null_fraction_statistics():
    _, _, null = draw_training_noise(np.random.default_rng(0), 40_000, (2,), 5, 0.25)
    assert abs(null.mean() - 0.25) < 0.01


# -- guidance ---------------------------------------------------------------

def test_cfg_collapses_bit_exactly(rng):
    den = tiny_denoiser(rng)
    x = rng.normal(size=(4, 4, 4))
    s, a, g = cond_batch(rng, 4)
    k = np.full(4, 3)
    eps_c = den.forward(x, k, s, a, g, np.zeros(4))
    eps_u = den.forward(x, k, s, a, g, np.ones(4))
    np.testing.assert_array_equal(cfg_epsilon(den, x, 3, s, a, g, 0.0), eps_c)
    np.testing.assert_array_equal(cfg_epsilon(den, x, 3, s, a, g, -1.0), eps_u)
    np.testing.assert_allclose(cfg_epsilon(den, x, 3, s, a, g, 2.0), eps_u + 3.0 * (eps_c - eps_u), atol=1e-12)


@given(st.floats(-3, 5))
def test_cfg_degenerate_agreement(omega):
    rng = np.random.default_rng(0)
    den = Denoiser(DenoiserSpec(3, 3, 2, width=8, n_blocks=1, emb_dim=8), rng)
    # zero condition embeddings, zero state and a zero null vector make both branches identical
    for name in den.store.names():
        if name.startswith(("rtg.l2", "act.l2")):
            den.store[name][...] = 0.0
    den.store["out.W"][...] = rng.normal(size=den.store["out.W"].shape)
    x = rng.normal(size=(2, 4, 4))
    s, a, g = np.zeros((2, 3)), rng.uniform(-1, 1, (2, 2)), rng.normal(size=2)
    eps_c = den.forward(x, np.full(2, 2), s, a, g, np.zeros(2))
    np.testing.assert_array_equal(cfg_epsilon(den, x, 2, s, a, g, omega), eps_c)


def test_guidance_validation():
    GuidanceConfig().validate(5)
    for bad in (GuidanceConfig(n_steps=0), GuidanceConfig(n_steps=6), GuidanceConfig(p_null=1.5),
                GuidanceConfig(alpha_temp=-0.1)):
        with pytest.raises(ValueError):
            bad.validate(5)


def test_zero_temperature_sampling_deterministic(rng):
    den = tiny_denoiser(rng)
    s, a, g = cond_batch(rng, 5)
    guid = GuidanceConfig(omega=1.0, n_steps=3, alpha_temp=0.0)
    x1 = reverse_diffusion(den, SCHED, s, a, g, guid, np.random.default_rng(1))
    x2 = reverse_diffusion(den, SCHED, s, a, g, guid, np.random.default_rng(99))
    np.testing.assert_array_equal(x1, x2)


def test_sampling_respects_clip(rng):
    den = tiny_denoiser(rng, perturb=3.0)
    s, a, g = cond_batch(rng, 5)
    x = reverse_diffusion(den, SCHED, s, a, g, GuidanceConfig(n_steps=3), rng, x0_clip=0.5)
    assert np.all(np.abs(x) <= 0.5)


# -- coder and world model --------------------------------------------------

@given(arrays(np.float64, (5, 3, 3), elements=st.floats(-10, 10)),
       arrays(np.float64, (5, 2), elements=st.floats(-10, 10)))
def test_segment_coder_roundtrip(x0, anchors):
    coder = SegmentCoder.fit(x0, anchors)
    np.testing.assert_allclose(coder.decode(coder.encode(x0, anchors), anchors), x0, atol=1e-8)


def test_segment_coder_standardizes(rng):
    x0 = rng.normal(size=(200, 4, 3)) * 5 + 2
    anchors = rng.normal(size=(200, 2))
    z = SegmentCoder.fit(x0, anchors).encode(x0, anchors)
    np.testing.assert_allclose(z.mean(0), 0, atol=1e-10)
    np.testing.assert_allclose(z.std(0), 1, atol=1e-10)


@pytest.fixture(scope="module")
def tiny_world_model(small_dataset):
    cfg = DiffusionConfig(width=8, n_blocks=1, emb_dim=8, steps=300, batch_size=32)
    return train_world_model(small_dataset, 3, cfg, np.random.default_rng(0))


def test_training_reduces_loss(tiny_world_model):
    _, losses = tiny_world_model
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


def test_world_model_roundtrip(tmp_path, tiny_world_model, small_dataset):
    wm, _ = tiny_world_model
    p = tmp_path / "wm.ckpt"
    wm.save(p)
    back = WorldModel.load(p)
    tr = small_dataset.transitions()
    s, a = tr["states"][:16], tr["actions"][:16]
    g = wm.guidance(n_steps=3, alpha_temp=0.5)
    x1, f1 = wm.sample(s, a, g, np.random.default_rng(5))
    x2, f2 = back.sample(s, a, g, np.random.default_rng(5))
    np.testing.assert_array_equal(x1, x2)
    assert x1.shape == (16, 4, 5) and not f1.any()
    assert back.g_range == wm.g_range and back.step == 300


def test_default_g_eval_inside_support(tiny_world_model):
    wm, _ = tiny_world_model
    lo, hi = wm.g_range
    assert lo < wm.default_g_eval() < hi


def test_config_validation():
    with pytest.raises(ValueError):
        DiffusionConfig(decay_mode="polyak")
    with pytest.raises(ValueError):
        DiffusionConfig(lr_schedule="step")
