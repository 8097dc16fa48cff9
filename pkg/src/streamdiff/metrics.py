"""Readouts on generated latent streams: garment error, motion continuity, attention mass.

Each metric has a whole-array form and a streaming accumulator that
consumes chunks as they are produced; the two are kept as separate code paths
so they can check each other.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


def garment_error(latents: np.ndarray, codes: np.ndarray, world) -> np.ndarray:
    """L2 distance of each frame's garment channels to a code.

    Args:
        latents: (B, n, P, C) stream.
        codes: (B,) codebook indices, one per batch item.

    Returns:
        (B, n) distances.
    """
    g = world.garment_readout(latents)
    target = world.codebook[np.asarray(codes)][:, None]
    return np.sqrt(((g - target) ** 2).sum(axis=(-1, -2)))


def motion_deltas(latents: np.ndarray, world) -> np.ndarray:
    """(B, n-1) L2 norm of frame-to-frame motion-channel changes."""
    m = world.motion_readout(latents)
    return np.sqrt(((m[:, 1:] - m[:, :-1]) ** 2).sum(axis=(-1, -2)))


def nearest_code(latents: np.ndarray, world) -> np.ndarray:
    """Codebook index closest to each frame's garment channels, (B, n)."""
    g = world.garment_readout(latents)
    d = ((g[:, :, None] - world.codebook[None, None]) ** 2).sum(axis=(-1, -2))
    return d.argmin(-1)


@dataclass(frozen=True)
class SwitchMetrics:
    pre_old: float  # garment error to the old code before the switch
    post_old: float
    post_new: float
    boundary_delta: float  # motion delta between the last pre- and first post-switch frame
    median_intra: float  # median over steps of the batch-mean delta inside either segment
    continuity_ratio: float

    def as_dict(self) -> dict:
        return asdict(self)


def switch_metrics(stream: np.ndarray, switch_frame: int, old_codes, new_codes, world) -> SwitchMetrics:
    """Whole-array evaluation of a stream with a garment switch at ``switch_frame``."""
    if not 0 < switch_frame < stream.shape[1]:
        raise ValueError(f"switch frame {switch_frame} outside the stream")
    pre, post = stream[:, :switch_frame], stream[:, switch_frame:]
    d = motion_deltas(stream, world).mean(axis=0)
    b = switch_frame - 1
    intra = float(np.median(np.delete(d, b)))
    bd = float(d[b])
    return SwitchMetrics(
        pre_old=float(garment_error(pre, old_codes, world).mean()),
        post_old=float(garment_error(post, old_codes, world).mean()),
        post_new=float(garment_error(post, new_codes, world).mean()),
        boundary_delta=bd,
        median_intra=intra,
        continuity_ratio=bd / intra,
    )


class StreamingSwitchMetrics:
    """Chunk-by-chunk accumulator producing the same numbers as ``switch_metrics``."""

    def __init__(self, world, switch_frame: int, old_codes, new_codes):
        self.world = world
        self.switch_frame = switch_frame
        self.old = np.asarray(old_codes)
        self.new = np.asarray(new_codes)
        self.frames_seen = 0
        self._sums = {"pre_old": 0.0, "post_old": 0.0, "post_new": 0.0}
        self._counts = {"pre": 0, "post": 0}
        self._deltas: list[float] = []
        self._prev = None

    def _frame_error(self, frame: np.ndarray, codes) -> np.ndarray:
        g = frame[:, :, self.world.garment_slice]
        diff = g - self.world.codebook[codes]
        return np.sqrt((diff * diff).sum(axis=(1, 2)))

    def update(self, chunk: np.ndarray) -> None:
        for i in range(chunk.shape[1]):
            frame = chunk[:, i]
            if self.frames_seen < self.switch_frame:
                self._sums["pre_old"] += self._frame_error(frame, self.old).sum()
                self._counts["pre"] += frame.shape[0]
            else:
                self._sums["post_old"] += self._frame_error(frame, self.old).sum()
                self._sums["post_new"] += self._frame_error(frame, self.new).sum()
                self._counts["post"] += frame.shape[0]
            m = frame[:, :, self.world.motion_slice]
            if self._prev is not None:
                self._deltas.append(float(np.sqrt(((m - self._prev) ** 2).sum(axis=(1, 2))).mean()))
            self._prev = m
            self.frames_seen += 1

    def result(self) -> SwitchMetrics:
        if not 0 < self.switch_frame < self.frames_seen:
            raise ValueError("stream has not passed the switch frame yet")
        b = self.switch_frame - 1
        bd = self._deltas[b]
        intra = float(np.median(self._deltas[:b] + self._deltas[b + 1 :]))
        return SwitchMetrics(
            pre_old=self._sums["pre_old"] / self._counts["pre"],
            post_old=self._sums["post_old"] / self._counts["post"],
            post_new=self._sums["post_new"] / self._counts["post"],
            boundary_delta=bd,
            median_intra=intra,
            continuity_ratio=bd / intra,
        )


def mean_attention_mass(trace: list[dict], chunks=None) -> dict[str, float]:
    """Average recorded attention masses over trace rows (optionally a chunk subset)."""
    rows = [r for r in trace if "historical_mass" in r and (chunks is None or r["chunk"] in chunks)]
    if not rows:
        raise ValueError("trace has no attention-mass rows")
    keys = ("conditional_mass", "historical_mass", "intra_mass")
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def window_means(values, windows) -> list[float]:
    """Mean of ``values[lo:hi]`` for each ``(lo, hi)``."""
    v = np.asarray(values, dtype=np.float64)
    return [float(v[lo:hi].mean()) for lo, hi in windows]
