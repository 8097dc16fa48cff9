"""Synthetic reference / garment / video triplets.

Every latent token has ``garment_channels`` channels holding the garment code
(constant over time) and the remaining channels holding a motion state made
of rotating phasors ``(a cos(w s + phi), a sin(w s + phi))`` evaluated at
pixel frame ``s``. Frequencies are shared by the whole dataset; amplitudes
and phases vary per sample. Videos are rendered in pixel space through the
codec's decoder and encoded back, so latent frames after the first average
four pixel frames.

The reference image is pixel frame 0 wearing a *different* codebook garment;
the garment image shows the target code (plus rendering noise) and no motion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import LatentCodec, PixelVideo, pixel_length
from .rng import make_rng


@dataclass(frozen=True)
class DataConfig:
    tokens: int = 4
    channels: int = 16
    garment_channels: int = 4
    pixel_dim: int = 64
    codebook_size: int = 8
    amp_range: tuple[float, float] = (0.6, 1.2)
    omega_range: tuple[float, float] = (2 * np.pi / 160, 2 * np.pi / 96)  # radians per pixel frame
    garment_noise: float = 0.6
    seed: int = 0

    @property
    def motion_pairs(self) -> int:
        m = self.channels - self.garment_channels
        if m % 2:
            raise ValueError("motion channel count must be even")
        return m // 2


class World:
    """The fixed parts of the synthetic domain: codec, codebook and motion frequencies."""

    def __init__(self, cfg: DataConfig = DataConfig()):
        self.cfg = cfg
        rng = make_rng(cfg.seed, 1)
        self.codec = LatentCodec(cfg.tokens, cfg.channels, cfg.pixel_dim, seed=cfg.seed)
        self.codebook = rng.standard_normal((cfg.codebook_size, cfg.tokens, cfg.garment_channels))
        self.omega = rng.uniform(*cfg.omega_range, size=(cfg.tokens, cfg.motion_pairs))

    @property
    def garment_slice(self) -> slice:
        return slice(0, self.cfg.garment_channels)

    @property
    def motion_slice(self) -> slice:
        return slice(self.cfg.garment_channels, self.cfg.channels)

    def motion_state(self, amp: np.ndarray, phase: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Motion channels (len(s), P, 2*pairs) at pixel frames ``s``."""
        ang = self.omega[None] * np.asarray(s, dtype=np.float64)[:, None, None] + phase[None]
        out = np.empty((len(s),) + amp.shape + (2,))
        out[..., 0] = amp * np.cos(ang)
        out[..., 1] = amp * np.sin(ang)
        return out.reshape(len(s), self.cfg.tokens, -1)

    def state(self, garment: np.ndarray, motion: np.ndarray) -> np.ndarray:
        n = motion.shape[0]
        g = np.broadcast_to(garment, (n,) + garment.shape[-2:])
        return np.concatenate([g, motion], axis=-1)

    def render(self, states: np.ndarray) -> np.ndarray:
        """Latent-space states (n, P, C) -> pixel frames (n, Dp)."""
        return states.reshape(states.shape[0], -1) @ self.codec.decoder.T

    def garment_image(self, code_id: int, rng: np.random.Generator) -> np.ndarray:
        cfg = self.cfg
        g = self.codebook[code_id] + cfg.garment_noise * rng.standard_normal(self.codebook[code_id].shape)
        motion = np.zeros((1, cfg.tokens, cfg.channels - cfg.garment_channels))
        return self.render(self.state(g, motion))[0]

    def garment_readout(self, latents: np.ndarray) -> np.ndarray:
        return latents[..., self.garment_slice]

    def motion_readout(self, latents: np.ndarray) -> np.ndarray:
        return latents[..., self.motion_slice]


@dataclass(frozen=True)
class SyntheticSample:
    garment_id: int
    worn_id: int
    amp: np.ndarray
    phase: np.ndarray
    video: PixelVideo
    reference_image: np.ndarray
    garment_image: np.ndarray
    latents: np.ndarray  # (f, P, C)
    reference_latent: np.ndarray  # (P, C)
    garment_latent: np.ndarray  # (P, C)


def make_sample(world: World, rng: np.random.Generator, f: int, garment_id: int | None = None) -> SyntheticSample:
    cfg = world.cfg
    K = cfg.codebook_size
    gid = int(rng.integers(K)) if garment_id is None else int(garment_id)
    wid = int((gid + 1 + rng.integers(K - 1)) % K)
    amp = rng.uniform(*cfg.amp_range, size=(cfg.tokens, cfg.motion_pairs))
    phase = rng.uniform(0, 2 * np.pi, size=(cfg.tokens, cfg.motion_pairs))
    F = pixel_length(f)
    motion = world.motion_state(amp, phase, np.arange(F))
    video = PixelVideo(world.render(world.state(world.codebook[gid], motion)))
    ref_img = world.render(world.state(world.codebook[wid], motion[:1]))[0]
    gar_img = world.garment_image(gid, rng)
    codec = world.codec
    return SyntheticSample(
        garment_id=gid,
        worn_id=wid,
        amp=amp,
        phase=phase,
        video=video,
        reference_image=ref_img,
        garment_image=gar_img,
        latents=codec.encode(video).frames,
        reference_latent=codec.encode_image(ref_img).frames[0],
        garment_latent=codec.encode_image(gar_img).frames[0],
    )


@dataclass(frozen=True)
class Dataset:
    samples: tuple
    train_index: np.ndarray
    eval_index: np.ndarray

    def __len__(self) -> int:
        return len(self.samples)

    def arrays(self, idx=None) -> dict[str, np.ndarray]:
        idx = np.arange(len(self.samples)) if idx is None else np.asarray(idx)
        s = [self.samples[i] for i in idx]
        return {
            "latents": np.stack([x.latents for x in s]),
            "reference": np.stack([x.reference_latent for x in s]),
            "garment": np.stack([x.garment_latent for x in s]),
            "garment_id": np.array([x.garment_id for x in s]),
            "worn_id": np.array([x.worn_id for x in s]),
        }


def generate_dataset(world: World, n: int, f: int, seed: int, eval_fraction: float = 0.125) -> Dataset:
    """``n`` samples of ``f`` latent frames; deterministic per ``seed``. Each sample has its own stream."""
    if n < 1:
        raise ValueError("need at least one sample")
    samples = tuple(make_sample(world, make_rng(seed, i), f) for i in range(n))
    n_eval = int(round(n * eval_fraction)) if n > 1 else 0
    idx = np.arange(n)
    return Dataset(samples, idx[: n - n_eval], idx[n - n_eval :])


def write_dataset_csv(path, dataset: Dataset) -> None:
    """Every pixel frame of every sample: ``sample, frame, p0..p{Dp-1}``."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dp = dataset.samples[0].video.frames.shape[1]
        w.writerow(["sample", "frame"] + [f"p{i}" for i in range(dp)])
        for si, s in enumerate(dataset.samples):
            for fi, row in enumerate(s.video.frames):
                w.writerow([si, fi] + [repr(float(x)) for x in row])
