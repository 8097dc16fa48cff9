"""Toy linear stand-in for a video VAE with 4x temporal compression.

Pixel frame 0 is encoded on its own; every following group of four pixel
frames is averaged and projected to one latent frame. The projection ``E``
has orthonormal rows, so ``D = E.T`` and the decoder (which repeats each
latent frame four times) is an exact right inverse of the encoder.

A latent frame is the ``P*C`` projection reshaped token-major: element
``p*C + c`` is token ``p``, channel ``c``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import make_rng

GROUP = 4


@dataclass(frozen=True)
class PixelVideo:
    frames: np.ndarray  # (F, Dp)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class LatentSequence:
    frames: np.ndarray  # (f, P, C)
    timesteps: np.ndarray = field(default=None)  # (f,)

    def __post_init__(self):
        if self.timesteps is None:
            object.__setattr__(self, "timesteps", np.zeros(self.frames.shape[0]))

    def __len__(self) -> int:
        return self.frames.shape[0]


def latent_length(num_pixel_frames: int) -> int:
    if num_pixel_frames < 1 or (num_pixel_frames - 1) % GROUP:
        raise ValueError(f"pixel frame count {num_pixel_frames} is not 1 mod {GROUP}")
    return (num_pixel_frames - 1) // GROUP + 1


def pixel_length(num_latent_frames: int) -> int:
    return GROUP * (num_latent_frames - 1) + 1


class LatentCodec:
    def __init__(self, tokens: int = 4, channels: int = 16, pixel_dim: int = 64, seed: int = 0):
        latent_dim = tokens * channels
        if latent_dim > pixel_dim:
            raise ValueError("latent frame dimension must not exceed pixel dimension")
        self.tokens, self.channels, self.pixel_dim = tokens, channels, pixel_dim
        g = make_rng(seed).standard_normal((pixel_dim, latent_dim))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        self.encoder = q.T  # (P*C, Dp), orthonormal rows
        self.decoder = q  # (Dp, P*C)

    @classmethod
    def from_matrix(cls, encoder: np.ndarray, tokens: int, channels: int) -> "LatentCodec":
        self = cls.__new__(cls)
        self.tokens, self.channels = tokens, channels
        self.pixel_dim = encoder.shape[1]
        self.encoder = np.array(encoder, dtype=np.float64)
        self.decoder = self.encoder.T.copy()
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"codec.encoder": self.encoder}

    def _project(self, pixels: np.ndarray) -> np.ndarray:
        return (pixels @ self.encoder.T).reshape(-1, self.tokens, self.channels)

    def encode(self, video: PixelVideo) -> LatentSequence:
        frames = np.asarray(video.frames, dtype=np.float64)
        f = latent_length(frames.shape[0])
        pooled = np.empty((f, self.pixel_dim))
        pooled[0] = frames[0]
        if f > 1:
            pooled[1:] = frames[1:].reshape(f - 1, GROUP, self.pixel_dim).mean(axis=1)
        return LatentSequence(self._project(pooled))

    def encode_image(self, frame: np.ndarray) -> LatentSequence:
        return self.encode(PixelVideo(np.asarray(frame, dtype=np.float64).reshape(1, -1)))

    def decode(self, latents: LatentSequence | np.ndarray) -> PixelVideo:
        z = latents.frames if isinstance(latents, LatentSequence) else np.asarray(latents)
        if not np.isfinite(z).all():
            raise ValueError("decode: non-finite latents")
        flat = z.reshape(z.shape[0], -1) @ self.decoder.T  # (f, Dp)
        reps = np.full(z.shape[0], GROUP)
        reps[0] = 1
        return PixelVideo(np.repeat(flat, reps, axis=0))

    def reencode_last_frame(self, latent_frame: np.ndarray) -> np.ndarray:
        """Decode one latent frame, keep its final pixel frame, re-encode it as an image."""
        pixels = self.decode(np.asarray(latent_frame)[None]).frames
        return self.encode_image(pixels[-1]).frames[0]


def write_video_csv(path, video: PixelVideo) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + [f"p{i}" for i in range(video.frames.shape[1])])
        for i, row in enumerate(video.frames):
            w.writerow([i] + [repr(float(x)) for x in row])


def read_video_csv(path) -> PixelVideo:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return PixelVideo(np.array([[float(x) for x in r[1:]] for r in rows]))
