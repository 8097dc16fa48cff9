import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from streamdiff import autodiff as ad
from streamdiff.backbone import Backbone, BackboneConfig, ConditionSet, UnifiedSequence, condition_block, context_block, video_block
from streamdiff.distill import (
    DmdState,
    GaussianOracle,
    RewardAdapter,
    distill_dmd,
    dmd_cotangent,
    dmd_step,
    fit_gaussian_fake_score,
    gaussian_dmd_grad,
    gaussian_score,
    reweight,
    teacher_forcing_step,
    unit_sphere_reward,
    velocity_to_score,
)
from streamdiff.flow import NoisePlan, StepSchedule, forward_noise
from streamdiff.masking import CLEAN, NOISY, attention_rules, build_tf_mask

CFG = BackboneConfig(layers=1, heads=2, head_dim=4, d_model=8, tokens=2, channels=4, time_dim=8, chunk=3)


def cond(rng, B=2):
    return ConditionSet(rng.standard_normal((B, 2, 4)), rng.standard_normal((B, 2, 4)))


# -- reweighting ------------------------------------------------------------


def test_reweight_spot_values():
    np.testing.assert_allclose(reweight([0.0, 0.2, 0.4], 0.2), [0.66524, 0.24473, 0.09003], atol=1e-5)
    np.testing.assert_allclose(reweight([0.5, 0.5, 0.5, 0.5], 0.2), 0.25, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(r=arrays(np.float64, (3, 5), elements=st.floats(-1, 1)), tau=st.floats(0.01, 10))
def test_reweight_properties(r, tau):
    w = reweight(r, tau)
    assert (w > 0).all()
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
    # lower reward never gets a smaller weight
    for row_r, row_w in zip(r, w):
        order = np.argsort(row_r, kind="stable")
        assert (np.diff(row_w[order]) <= 1e-15).all()
    np.testing.assert_allclose(reweight(r + 3.0, tau), w, atol=1e-12)
    np.testing.assert_allclose(reweight(r, 1e6), 0.2, atol=1e-6)


def test_reweight_low_temperature_is_one_hot_and_bad_inputs_fail():
    w = reweight([0.3, -0.9, 0.1], 1e-4)
    np.testing.assert_allclose(w, [0, 1, 0], atol=1e-12)
    with pytest.raises(ValueError):
        reweight([0.0], 0.0)
    with pytest.raises(ValueError):
        reweight([np.nan, 0.0], 1.0)


def test_unit_sphere_reward():
    frames = np.zeros((1, 3, 2, 2))
    frames[0, 0, 0, 0] = 1.0
    frames[0, 1] = 1.0
    np.testing.assert_allclose(unit_sphere_reward(frames), [[0.0, -1.0, -1.0]])


# -- scores and cotangent ---------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-3, 3), t=st.sampled_from([0.25, 0.5, 0.75, 1.0]), z=st.floats(-5, 5))
def test_point_mass_velocity_gives_exact_score(c, t, z):
    v = (z - c) / t
    np.testing.assert_allclose(velocity_to_score(z, v, t), -(z - (1 - t) * c) / t**2, rtol=1e-10, atol=1e-10)


def test_gaussian_velocity_and_score_agree():
    from streamdiff.distill import gaussian_velocity

    x = np.linspace(-3, 3, 7)
    for t in (0.25, 0.5, 1.0):
        np.testing.assert_allclose(
            velocity_to_score(x, gaussian_velocity(x, t, 1.2, 0.6), t), gaussian_score(x, t, 1.2, 0.6), atol=1e-12
        )


def test_cotangent_sign_and_weighting():
    s_real = np.ones((1, 2, 1, 1))
    s_fake = np.zeros((1, 2, 1, 1))
    cot = dmd_cotangent(s_real, s_fake, 0.5, np.array([[0.25, 0.75]]))
    np.testing.assert_allclose(cot.ravel(), [-0.125, -0.375])


# -- Gaussian testbed -------------------------------------------------------


def test_gaussian_gradient_pushes_b_toward_real_mean():
    rng = np.random.default_rng(0)
    _, gb = gaussian_dmd_grad(GaussianOracle(mu_r=2.0, b=0.0), rng, StepSchedule(), batch=2048)
    assert gb < 0
    _, gb = gaussian_dmd_grad(GaussianOracle(mu_r=-2.0, b=0.0), rng, StepSchedule(), batch=2048)
    assert gb > 0
    ga, gb = gaussian_dmd_grad(GaussianOracle(mu_r=2.0, sigma_r=1.0, a=1.0, b=2.0), rng, StepSchedule())
    assert ga == 0.0 and gb == 0.0


def test_fitted_fake_score_matches_analytic_score():
    m, s = 0.5, 1.5
    sched = StepSchedule()
    model = fit_gaussian_fake_score(m, s, sched, steps=1500)
    worst = 0.0
    for t in sched.timesteps:
        sd = np.sqrt((1 - t) ** 2 * s**2 + t**2)
        x = (1 - t) * m + np.linspace(-3, 3, 61) * sd
        worst = max(worst, np.abs(model.score(x, t) - gaussian_score(x, t, m, s)).max())
    assert worst <= 0.05


# -- network DMD ------------------------------------------------------------


def make_state(seed=0, **kw):
    gen = Backbone(CFG, seed=seed)
    return DmdState(gen, gen.copy(), Backbone(CFG, seed=seed + 1), **kw)


def test_equal_rewards_reproduce_vanilla_gradients():
    c = cond(np.random.default_rng(1))
    flat = RewardAdapter(fn=lambda x: np.full(x.shape[:2], 0.3))
    a = dmd_step(make_state(), c, 6, np.random.default_rng(5))
    b = dmd_step(make_state(), c, 6, np.random.default_rng(5), rewards=flat)
    for k in a["grads"]:
        np.testing.assert_allclose(a["grads"][k], b["grads"][k], atol=1e-12, rtol=0)


def test_real_score_is_frozen_and_counters_follow_ratio():
    state = make_state(ratio=5)
    real_before = {k: v.data.copy() for k, v in state.real.params.items()}
    rng = np.random.default_rng(2)
    c = cond(rng)

    def batches():
        while True:
            yield c, 0

    rows = []
    distill_dmd(state, batches(), 3, 10, rng, rewards=RewardAdapter(), log_rows=rows)
    assert state.gen_steps == 10 and state.fake_steps == 50 and state.skipped == 0
    assert len(rows) == 10 and set(rows[0]) == {"step", "generator_surrogate", "fake_loss", "weight_mean", "reward_mean"}
    for k, v in state.real.params.items():
        np.testing.assert_array_equal(v.data, real_before[k])


def test_non_finite_scores_skip_the_update():
    state = make_state()
    state.real.params["head.b"] = ad.Tensor(np.full(4, np.nan))
    before = {k: v.data.copy() for k, v in state.generator.params.items()}
    out = dmd_step(state, cond(np.random.default_rng(0)), 3, np.random.default_rng(0))
    assert out["skipped"] and state.skipped == 1 and state.gen_steps == 0
    for k, v in state.generator.params.items():
        np.testing.assert_array_equal(v.data, before[k])


# -- teacher forcing --------------------------------------------------------


def per_chunk_loss(model, z0, c, plan):
    """Explicit loop: each noisy chunk sees the conditions, earlier clean chunks and itself."""
    B, f, P, C = z0.shape
    zt = forward_noise(z0, plan)
    errs = []
    for k in range(f // CFG.chunk):
        lo, hi = k * CFG.chunk, (k + 1) * CFG.chunk
        seq = UnifiedSequence.concat(
            context_block(B, C),
            condition_block(c),
            video_block(z0[:, :lo], 0.0, np.arange(lo), CFG.chunk, CLEAN),
            video_block(zt[:, lo:hi], plan.t[:, lo:hi], np.arange(lo, hi), CFG.chunk, NOISY),
        )
        allowed = attention_rules(seq.layout, seq.layout)
        allowed[seq.layout.half == NOISY] = True
        pred = model.forward(seq, allowed).pred.data[:, lo * P :].reshape(B, CFG.chunk, P, C)
        errs.append((pred - (plan.noise[:, lo:hi] - z0[:, lo:hi])) ** 2)
    return np.concatenate(errs, axis=1).mean()


def test_tf_loss_equals_per_chunk_loop():
    rng = np.random.default_rng(3)
    model = Backbone(CFG, seed=4)
    z0 = rng.standard_normal((2, 9, 2, 4))
    c = cond(rng)
    plan = NoisePlan.draw(rng, z0.shape, per="chunk", chunk=3)
    loss, _ = teacher_forcing_step(model, z0, c, plan, build_tf_mask(9, 2, 3, duplicate_conditions=False), with_grad=False)
    assert abs(loss - per_chunk_loss(model, z0, c, plan)) < 1e-10
    # the duplicated-condition layout is accepted too
    dup, _ = teacher_forcing_step(model, z0, c, plan, build_tf_mask(9, 2, 3), with_grad=False)
    assert np.isfinite(dup)
    with pytest.raises(ValueError):
        teacher_forcing_step(model, z0, c, plan, build_tf_mask(6, 2, 3), with_grad=False)


class EchoModel:
    """Predicts each video token's own input, i.e. the noise when z0 = 0 and t = 1."""

    cfg = CFG
    params = {}

    def forward(self, seq, mask):
        class R:
            pred = ad.Tensor(seq.x[:, seq.video_index])

        return R


def test_perfect_predictor_has_zero_tf_loss():
    rng = np.random.default_rng(0)
    z0 = np.zeros((1, 6, 2, 4))
    plan = NoisePlan(np.ones((1, 6)), rng.standard_normal(z0.shape))
    loss, _ = teacher_forcing_step(EchoModel(), z0, cond(rng, 1), plan, build_tf_mask(6, 2, 3), with_grad=False)
    assert loss == 0.0
