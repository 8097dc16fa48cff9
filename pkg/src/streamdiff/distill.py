"""Student training: in-context teacher forcing, (reweighted) DMD, fake-score updates.

Scores are derived from velocity predictions through the interpolation
``z_t = (1 - t) z_0 + t eps``: ``eps_hat = z_t + (1 - t) v`` and
``score = -eps_hat / t``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .backbone import Backbone, ConditionSet, UnifiedSequence, condition_block, context_block, video_block
from .flow import NoisePlan, StepSchedule, cfm_loss, forward_noise
from .masking import CLEAN, NOISY, AttentionMask, build_tf_mask
from .optim import AdamW
from .session import commit_chunk, denoise_chunk, new_cache

log = logging.getLogger(__name__)


# -- teacher forcing ------------------------------------------------------


def tf_sequence(z0: np.ndarray, zt: np.ndarray, t: np.ndarray, cond: ConditionSet, frames, chunk: int, duplicate_conditions: bool) -> UnifiedSequence:
    B, f, P, C = z0.shape
    parts = [context_block(B, C), condition_block(cond, CLEAN), video_block(z0, 0.0, frames, chunk, CLEAN)]
    if duplicate_conditions:
        parts.append(condition_block(cond, NOISY))
    parts.append(video_block(zt, t, frames, chunk, NOISY))
    return UnifiedSequence.concat(*parts)


def teacher_forcing_loss(student: Backbone, z0, cond: ConditionSet, plan: NoisePlan, tf_mask: AttentionMask, frames=None) -> Tensor:
    B, f, P, C = z0.shape
    frames = np.arange(f) if frames is None else np.asarray(frames)
    duplicate = len(tf_mask.rows) == 1 + 4 * P + 2 * f * P
    seq = tf_sequence(z0, forward_noise(z0, plan), plan.t, cond, frames, student.cfg.chunk, duplicate)
    if tf_mask.allowed.shape[0] != len(seq):
        raise ValueError(f"teacher-forcing mask covers {tf_mask.allowed.shape[0]} tokens, sequence has {len(seq)}")
    pred = student.forward(seq, tf_mask).pred  # clean half first, then noisy half
    noisy = pred[:, f * P :].reshape(B, f, P, C)
    return ad.mean(ad.square(ad.sub(noisy, plan.noise - z0)))


def teacher_forcing_step(student: Backbone, z0, cond: ConditionSet, plan: NoisePlan, tf_mask: AttentionMask, frames=None, with_grad=True):
    """Velocity loss on the noisy half under the teacher-forcing mask; returns (loss, grads)."""
    if not with_grad:
        with ad.no_grad():
            return float(teacher_forcing_loss(student, z0, cond, plan, tf_mask, frames).data), {}
    params = student.params
    with Tape() as tape:
        tape.watch(*params.values())
        loss = teacher_forcing_loss(student, z0, cond, plan, tf_mask, frames)
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError("non-finite teacher-forcing loss")
    return value, dict(zip(params.keys(), tape.gradient(loss, list(params.values()))))


# -- reweighting ----------------------------------------------------------


def reweight(rewards, tau: float) -> np.ndarray:
    """Per-frame weights ``softmax(-R / tau)`` over the last axis.

    Low-reward frames get larger weights; weights sum to one.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    r = np.asarray(rewards, dtype=np.float64)
    if r.shape[-1] < 1:
        raise ValueError("need at least one frame")
    if not np.isfinite(r).all():
        raise ValueError("non-finite rewards")
    x = -r / tau
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def unit_sphere_reward(frames: np.ndarray) -> np.ndarray:
    """``-| ||frame||_2 - 1 |`` per latent frame; frames (..., f, P, C) -> (..., f)."""
    norms = np.sqrt((frames.reshape(frames.shape[:-2] + (-1,)) ** 2).sum(-1))
    return -np.abs(norms - 1.0)


@dataclass
class RewardAdapter:
    """Deterministic per-frame reward applied to latents, or to decoded pixels when ``on_pixels``."""

    fn: Callable = unit_sphere_reward
    on_pixels: bool = False
    codec: object = None

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        if not self.on_pixels:
            return self.fn(frames)
        lead = frames.shape[:-2]
        flat = frames.reshape((-1,) + frames.shape[-2:])
        px = flat.reshape(flat.shape[0], -1) @ self.codec.decoder.T
        return self.fn(px.reshape(lead + (1, -1))).reshape(lead) if px.size else np.zeros(lead)


# -- DMD ------------------------------------------------------------------


def velocity_to_score(zt, v, t):
    t = np.asarray(t, dtype=np.float64)
    return -(zt + (1.0 - t) * v) / t


def dmd_cotangent(s_real: np.ndarray, s_fake: np.ndarray, t, weights: np.ndarray) -> np.ndarray:
    """Cotangent for the generator output: ``-A * (1 - t) * (s_real - s_fake)``.

    ``weights`` has one entry per frame (shape (B, f)); score arrays are
    (B, f, ...) and ``t`` broadcasts against them.
    """
    w = np.asarray(weights, dtype=np.float64)
    w = w.reshape(w.shape + (1,) * (s_real.ndim - w.ndim))
    return -w * (1.0 - np.asarray(t)) * (s_real - s_fake)


@dataclass
class DmdState:
    generator: Backbone
    fake: Backbone
    real: Backbone
    schedule: StepSchedule = field(default_factory=StepSchedule)
    tau: float = 0.2
    ratio: int = 5
    max_cache: int | None = None
    gen_lr: float = 2e-4
    fake_lr: float = 4e-4
    gen_opt: AdamW = None
    fake_opt: AdamW = None
    gen_steps: int = 0
    fake_steps: int = 0
    skipped: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.gen_opt is None:
            self.gen_opt = AdamW(self.generator.params, lr=self.gen_lr, betas=(0.0, 0.999), weight_decay=0.01)
        if self.fake_opt is None:
            self.fake_opt = AdamW(self.fake.params, lr=self.fake_lr, betas=(0.0, 0.999), weight_decay=0.01)


def self_forcing_rollout(generator: Backbone, cond: ConditionSet, f: int, schedule: StepSchedule, rng, max_cache=None, frame_offset: int = 0, keep_graph=False):
    """Autoregressive few-step rollout conditioned on the generator's own history.

    Returns a list of per-chunk outputs: Tensors (graph through each chunk's
    final denoising step) when ``keep_graph``, arrays otherwise.
    """
    cfg = generator.cfg
    if f % cfg.chunk:
        raise ValueError(f"rollout length {f} not divisible by chunk {cfg.chunk}")
    cache = new_cache(generator, cond, max_cache)
    outs = []
    for c in range(f // cfg.chunk):
        frames = np.arange(frame_offset + c * cfg.chunk, frame_offset + (c + 1) * cfg.chunk)
        noise = rng.standard_normal((cond.batch, cfg.chunk, cfg.tokens, cfg.channels))
        x0, _ = denoise_chunk(generator, cache, frames, noise, schedule, rng, keep_last_graph=keep_graph)
        outs.append(x0)
        cache = commit_chunk(generator, cache, ad._val(x0), frames)
    return outs


def dmd_step(state: DmdState, cond: ConditionSet, f: int, rng, weights=None, rewards: RewardAdapter | None = None, frame_offset: int = 0) -> dict:
    """One generator update.

    ``weights``: explicit per-frame weights (B, f); otherwise rewards are
    turned into weights when an adapter is given, else ``1/f`` (vanilla).
    """
    gen = state.generator
    params = gen.params
    with Tape() as tape:
        tape.watch(*params.values())
        chunks = self_forcing_rollout(gen, cond, f, state.schedule, rng, state.max_cache, frame_offset, keep_graph=True)
        G = ad.concat(chunks, axis=1)
    x = G.data
    B = x.shape[0]
    frames = np.arange(frame_offset, frame_offset + f)
    t = rng.choice(state.schedule.timesteps, size=B)
    tb = t[:, None, None, None]
    zt = (1.0 - tb) * x + tb * rng.standard_normal(x.shape)
    tt = np.repeat(t[:, None], f, axis=1)
    try:
        with ad.no_grad():
            v_real = state.real.velocity(zt, tt, cond, frames).data
            v_fake = state.fake.velocity(zt, tt, cond, frames).data
        s_real, s_fake = velocity_to_score(zt, v_real, tb), velocity_to_score(zt, v_fake, tb)
        finite = np.isfinite(s_real).all() and np.isfinite(s_fake).all()
    except FloatingPointError:
        finite = False
    if not finite:
        state.skipped += 1
        log.warning("dmd_step: non-finite scores, step skipped (%d so far)", state.skipped)
        return {"skipped": True}
    reward_mean = float("nan")
    if weights is None:
        if rewards is not None:
            r = rewards(x)
            reward_mean = float(r.mean())
            weights = reweight(r, state.tau)
        else:
            weights = np.full((B, f), 1.0 / f)
    cot = dmd_cotangent(s_real, s_fake, tb, weights) / B
    grads = tape.gradient(G, list(params.values()), cotangent=cot)
    state.gen_opt.step(dict(zip(params.keys(), grads)))
    state.gen_steps += 1
    return {
        "skipped": False,
        "surrogate": float((cot * x).sum()),
        "weight_mean": float(np.asarray(weights).mean()),
        "weight_max": float(np.asarray(weights).max()),
        "reward_mean": reward_mean,
        "grads": dict(zip(params.keys(), grads)),
    }


def train_fake_score(state: DmdState, samples: np.ndarray, cond: ConditionSet, rng, frames=None) -> float:
    """One velocity-regression update of the fake score on generator samples."""
    plan = NoisePlan.draw(rng, samples.shape, per="sample")
    loss, grads = cfm_loss(state.fake, samples, cond, plan, frames)
    state.fake_opt.step(grads)
    state.fake_steps += 1
    return loss


def distill_dmd(state: DmdState, batches, f: int, steps: int, rng, rewards: RewardAdapter | None = None, log_rows: list | None = None):
    """Alternate ``ratio`` fake-score updates with one generator update.

    ``batches`` yields ``(cond, frame_offset)`` pairs.
    """
    for _ in range(steps):
        fake_losses = []
        for _ in range(state.ratio):
            cond, off = next(batches)
            with ad.no_grad():
                x = np.concatenate(self_forcing_rollout(state.generator, cond, f, state.schedule, rng, state.max_cache, off), axis=1)
            fake_losses.append(train_fake_score(state, x, cond, rng, np.arange(off, off + f)))
        cond, off = next(batches)
        out = dmd_step(state, cond, f, rng, rewards=rewards, frame_offset=off)
        if log_rows is not None:
            log_rows.append(
                {
                    "step": state.gen_steps,
                    "generator_surrogate": out.get("surrogate", float("nan")),
                    "fake_loss": float(np.mean(fake_losses)),
                    "weight_mean": out.get("weight_mean", float("nan")),
                    "reward_mean": out.get("reward_mean", float("nan")),
                }
            )
    return state


# -- 1-D Gaussian testbed -----------------------------------------------------


@dataclass
class GaussianOracle:
    """Real data N(mu_r, sigma_r^2); generator G(eps) = a * eps + b."""

    mu_r: float = 2.0
    sigma_r: float = 1.0
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if self.sigma_r <= 0:
            raise ValueError("sigma_r must be positive")


def gaussian_noisy_var(s, t):
    return (1.0 - t) ** 2 * s**2 + t**2


def gaussian_score(x, t, m, s):
    """Score of the t-noised marginal of N(m, s^2): N((1-t) m, (1-t)^2 s^2 + t^2)."""
    return -(x - (1.0 - t) * m) / gaussian_noisy_var(s, t)


def gaussian_velocity(x, t, m, s):
    """Optimal velocity E[eps - x0 | z_t = x] for data N(m, s^2)."""
    return -m + (t - (1.0 - t) * s**2) / gaussian_noisy_var(s, t) * (x - (1.0 - t) * m)


def gaussian_dmd_grad(oracle: GaussianOracle, rng, schedule: StepSchedule, frames: int = 3, batch: int = 256, rewards: Callable | None = None, tau: float = 0.2, fake=None):
    """(d/da, d/db) for one DMD step; ``fake`` overrides the exact fake score (x, t) -> score."""
    a, b = Tensor(np.array(oracle.a)), Tensor(np.array(oracle.b))
    eps = rng.standard_normal((batch, frames))
    with Tape() as tape:
        tape.watch(a, b)
        G = a * eps + b
    x = G.data
    t = rng.choice(schedule.timesteps, size=(batch, 1))
    zt = (1.0 - t) * x + t * rng.standard_normal(x.shape)
    s_real = gaussian_score(zt, t, oracle.mu_r, oracle.sigma_r)
    s_fake = fake(zt, t) if fake is not None else gaussian_score(zt, t, oracle.b, abs(oracle.a))
    weights = reweight(rewards(x), tau) if rewards is not None else np.full((batch, frames), 1.0 / frames)
    cot = dmd_cotangent(s_real, s_fake, t, weights) / batch
    ga, gb = tape.gradient(G, [a, b], cotangent=cot)
    return float(ga), float(gb)


def gaussian_dmd_run(oracle: GaussianOracle, tau: float, steps: int, lr: float, seed: int = 0, schedule: StepSchedule | None = None, rewards: Callable | None = None, frames: int = 3, batch: int = 256) -> np.ndarray:
    """SGD on (a, b) with exact analytic scores; returns the (steps + 1, 2) trajectory."""
    from .rng import make_rng

    rng = make_rng(seed)
    schedule = schedule or StepSchedule()
    o = GaussianOracle(oracle.mu_r, oracle.sigma_r, oracle.a, oracle.b)
    traj = [(o.a, o.b)]
    for _ in range(steps):
        ga, gb = gaussian_dmd_grad(o, rng, schedule, frames, batch, rewards, tau)
        o.a -= lr * ga
        o.b -= lr * gb
        traj.append((o.a, o.b))
    return np.array(traj)


class GaussianVelocityModel:
    """Per-timestep affine velocity ``v = alpha_i x + beta_i`` for the 1-D testbed.

    Follows the ``model.velocity(z, t, cond, frames)`` protocol of the flow
    module with latents shaped (B, f, 1, 1).
    """

    def __init__(self, schedule: StepSchedule):
        self.ts = schedule.timesteps
        n = len(self.ts)
        self.params = {"alpha": Tensor(np.zeros(n)), "beta": Tensor(np.zeros(n))}

    def _index(self, t) -> np.ndarray:
        t = np.asarray(t)
        idx = np.abs(t[..., None] - self.ts).argmin(-1)
        if not np.allclose(self.ts[idx], t):
            raise ValueError("timestep not on the schedule")
        return idx

    def velocity(self, z, t, cond=None, frames=None):
        idx = self._index(t)[..., None, None]
        return ad.add(ad.mul(self.params["alpha"][idx], z), self.params["beta"][idx])

    def score(self, x, t):
        v = self.velocity(np.asarray(x)[..., None, None], np.broadcast_to(t, np.shape(x))).data[..., 0, 0]
        return velocity_to_score(x, v, t)


def fit_gaussian_fake_score(m: float, s: float, schedule: StepSchedule, steps: int = 3000, batch: int = 4096, lr: float = 0.02, seed: int = 0) -> GaussianVelocityModel:
    """Learn the fake score of N(m, s^2) samples with the velocity-regression loss."""
    from .rng import make_rng

    rng = make_rng(seed)
    model = GaussianVelocityModel(schedule)
    opt = AdamW(model.params, lr=lr, weight_decay=0.0)
    cond = ConditionSet(np.zeros((batch, 1, 1)), np.zeros((batch, 1, 1)))
    for i in range(steps):
        opt.lr = lr * (1.0 - i / steps)  # linear decay to zero averages out minibatch noise
        x0 = (m + s * rng.standard_normal(batch)).reshape(batch, 1, 1, 1)
        t = rng.choice(model.ts, size=(batch, 1))
        plan = NoisePlan(t, rng.standard_normal(x0.shape))
        _, grads = cfm_loss(model, x0, cond, plan)
        opt.step(grads)
    return model
