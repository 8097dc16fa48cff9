"""Linear-interpolation flow matching: noising, the velocity loss and samplers.

Convention: ``z_t = (1 - t) z_0 + t eps`` and the regression target is
``v = eps - z_0``, so ``z_0 = z_t - t v`` and ``eps = z_t + (1 - t) v``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .backbone import ConditionSet


@dataclass(frozen=True)
class NoisePlan:
    """Per-frame timesteps ``t`` (B, f) and standard-normal noise (B, f, P, C)."""

    t: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("timesteps must lie in [0, 1]")
        object.__setattr__(self, "t", t)

    @classmethod
    def draw(cls, rng: np.random.Generator, shape: tuple, per: str = "sample", chunk: int = 3, t=None) -> "NoisePlan":
        """Draw a plan for latents of ``shape`` (B, f, P, C).

        ``per`` picks how timesteps are shared: one per ``"sample"``, per
        ``"chunk"`` or per ``"frame"``. A fixed ``t`` overrides sampling.
        """
        B, f = shape[:2]
        if t is not None:
            tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (B, f)).copy()
        elif per == "sample":
            tt = np.repeat(rng.uniform(size=(B, 1)), f, axis=1)
        elif per == "chunk":
            n = -(-f // chunk)
            tt = np.repeat(rng.uniform(size=(B, n)), chunk, axis=1)[:, :f]
        elif per == "frame":
            tt = rng.uniform(size=(B, f))
        else:
            raise ValueError(f"unknown timestep sharing {per!r}")
        return cls(tt, rng.standard_normal(shape))


@dataclass(frozen=True)
class StepSchedule:
    """Strictly decreasing integer steps on the 0..1000 scale."""

    steps: tuple[int, ...] = (1000, 750, 500, 250)

    def __post_init__(self):
        s = tuple(int(x) for x in self.steps)
        if not s or any(a <= b for a, b in zip(s, s[1:])) or s[-1] <= 0 or s[0] > 1000:
            raise ValueError(f"invalid step schedule {s}")
        object.__setattr__(self, "steps", s)

    @property
    def timesteps(self) -> np.ndarray:
        return np.array(self.steps, dtype=np.float64) / 1000.0


def _tb(t: np.ndarray) -> np.ndarray:
    return t.reshape(t.shape + (1,) * 2)


def forward_noise(z0: np.ndarray, plan: NoisePlan) -> np.ndarray:
    """``(1 - t) z0 + t eps`` per frame; frames with t == 0 come back untouched."""
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape != plan.noise.shape:
        raise ValueError(f"latent shape {z0.shape} != noise shape {plan.noise.shape}")
    t = _tb(plan.t)
    return (1.0 - t) * z0 + t * plan.noise


def cfm_loss(model, z0: np.ndarray, cond: ConditionSet, plan: NoisePlan, frames=None, with_grad: bool = True):
    """Velocity-regression loss on video tokens only.

    ``model.velocity(z_t, t, cond, frames)`` must return (B, f, P, C)
    predictions; condition tokens never enter the loss.

    Returns:
        (loss, grads) where grads maps parameter names to arrays (empty when
        ``with_grad`` is False or the model has no parameters).
    """
    zt = forward_noise(z0, plan)
    target = plan.noise - z0
    params = getattr(model, "params", {}) or {}

    def compute():
        pred = model.velocity(zt, plan.t, cond, frames)
        return ad.mean(ad.square(ad.sub(pred, target)))

    if not with_grad or not params:
        loss = compute()
        return _checked(loss), {}
    with Tape() as tape:
        tape.watch(*params.values())
        loss = compute()
    value = _checked(loss)
    grads = tape.gradient(loss, list(params.values()))
    return value, dict(zip(params.keys(), grads))


def _checked(loss: Tensor) -> float:
    v = float(ad._val(loss))
    if not np.isfinite(v):
        raise FloatingPointError("non-finite flow-matching loss")
    return v


def euler_sample(velocity: Callable, noise: np.ndarray, steps: int) -> np.ndarray:
    """Integrate ``dz = v dt`` backwards from t=1 to t=0 in ``steps`` uniform steps."""
    if steps < 1:
        raise ValueError("need at least one step")
    z = noise
    ts = np.linspace(1.0, 0.0, steps + 1)
    for t, t_next in zip(ts[:-1], ts[1:]):
        z = z - (t - t_next) * velocity(z, t)
    return z


def fewstep_sample(velocity: Callable, noise: np.ndarray, schedule: StepSchedule, rng: np.random.Generator) -> np.ndarray:
    """Predict-x0-then-renoise sampler over ``schedule``.

    At each scheduled t: ``x0 = z_t - t v``; if another step follows, re-noise
    ``x0`` to that step's t with fresh noise. Returns the last ``x0``.
    """
    ts = schedule.timesteps
    z = noise
    x0 = None
    for i, t in enumerate(ts):
        x0 = z - t * velocity(z, t)
        if i + 1 < len(ts):
            tn = ts[i + 1]
            z = (1.0 - tn) * x0 + tn * rng.standard_normal(noise.shape)
    return x0


def _video_velocity(model, cond: ConditionSet, frames):
    def v(z, t):
        return ad._val(model.velocity(z, np.full(z.shape[:2], t), cond, frames))

    return v


def sample_multistep(model, cond: ConditionSet, f: int, steps: int, rng: np.random.Generator, frames=None) -> np.ndarray:
    """Teacher sampling: Euler over the bidirectional velocity field, conditions held clean."""
    P, C = cond.reference.shape[1:]
    noise = rng.standard_normal((cond.batch, f, P, C))
    return euler_sample(_video_velocity(model, cond, frames), noise, steps)


def sample_fewstep(model, cond: ConditionSet, f: int, schedule: StepSchedule, rng: np.random.Generator, frames=None) -> np.ndarray:
    """Few-step generation of a whole clip with the bidirectional forward."""
    P, C = cond.reference.shape[1:]
    noise = rng.standard_normal((cond.batch, f, P, C))
    return fewstep_sample(_video_velocity(model, cond, frames), noise, schedule, rng)
