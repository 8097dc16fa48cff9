"""Chunk-by-chunk streaming generation with garment-switch events.

Each step applies the cache events due at the chunk boundary, denoises a
fresh chunk with the few-step schedule against the KV cache, then runs the
clean chunk once more at t=0 and appends its K/V to the cache.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import Backbone, ConditionSet, video_block
from .flow import StepSchedule
from .kvcache import (
    CacheEvent,
    KvCache,
    attention_mass,
    garment_refresh,
    historical_withdraw,
    order_events,
    reference_disentangle,
    split_frames,
)
from .masking import NOISY
from .rng import make_rng

log = logging.getLogger(__name__)


class SessionFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class SwitchCommand:
    target_chunk: int
    garment: np.ndarray  # (P, C) or (B, P, C) garment latent
    withdraw: bool = True
    disentangle: bool = True

    def events(self) -> list[CacheEvent]:
        ev = [CacheEvent("refresh", self.target_chunk, self.garment)]
        if self.withdraw:
            ev.append(CacheEvent("withdraw", self.target_chunk))
        if self.disentangle:
            ev.append(CacheEvent("disentangle", self.target_chunk))
        return ev


def denoise_chunk(model: Backbone, cache: KvCache, frames, noise: np.ndarray, schedule: StepSchedule, rng, keep_last_graph=False, record_attention=False):
    """Few-step denoising of one chunk against ``cache``.

    Only the final step is recorded on active tapes when ``keep_last_graph``;
    earlier steps and the cache are constants. Returns ``(x0, attention)``.
    """
    ts = schedule.timesteps
    z = noise
    attn = None
    for i, t in enumerate(ts):
        last = i == len(ts) - 1
        seq = video_block(z, t, frames, model.cfg.chunk, NOISY)
        if last and keep_last_graph:
            res = model.forward_incremental(seq, cache, record_attention=record_attention)
            x0 = ad.sub(z, res.pred.reshape(z.shape) * t)
        else:
            with ad.no_grad():
                res = model.forward_incremental(seq, cache, record_attention=record_attention and last)
            x0 = z - t * res.pred.data.reshape(z.shape)
        if last:
            attn = res.attention
        else:
            tn = ts[i + 1]
            z = (1.0 - tn) * x0 + tn * rng.standard_normal(noise.shape)
    return x0, attn


def commit_chunk(model: Backbone, cache: KvCache, x0: np.ndarray, frames) -> KvCache:
    """Run the clean chunk at t=0 and append its K/V with FIFO eviction."""
    with ad.no_grad():
        res = model.forward_incremental(video_block(x0, 0.0, frames, model.cfg.chunk, NOISY), cache)
    return cache.append_and_evict(split_frames(res.kv, frames, model.cfg.tokens), int(frames[-1]))


def new_cache(model: Backbone, cond: ConditionSet, max_size: int | None) -> KvCache:
    cfg = model.cfg
    cache = KvCache(cfg.layers, cfg.tokens, cfg.chunk, max_size)
    with ad.no_grad():
        kv = model.condition_kv(cond)
    return cache.with_conditions(kv, cond.reference, cond.garment)


@dataclass
class Session:
    model: Backbone
    codec: object
    cache: KvCache
    rng: np.random.Generator
    schedule: StepSchedule = field(default_factory=StepSchedule)
    chunk_index: int = 0
    events: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    record_attention: bool = False
    failed: bool = False

    @property
    def chunk(self) -> int:
        return self.model.cfg.chunk

    @property
    def next_frame(self) -> int:
        return self.chunk_index * self.chunk

    @property
    def last_frame(self) -> np.ndarray | None:
        return self.outputs[-1][:, -1] if self.outputs else None

    def stream(self) -> np.ndarray:
        """All generated latent frames so far, (B, n_frames, P, C)."""
        return np.concatenate(self.outputs, axis=1)


def start(model: Backbone, codec, reference_latent, garment_latent, seed: int, max_cache: int | None = 23, schedule: StepSchedule | None = None, record_attention=False) -> Session:
    cond = ConditionSet(reference_latent, garment_latent)
    P, C = model.cfg.tokens, model.cfg.channels
    if cond.reference.shape[1:] != (P, C):
        raise ValueError(f"condition latents {cond.reference.shape[1:]} do not match model ({P}, {C})")
    return Session(
        model=model,
        codec=codec,
        cache=new_cache(model, cond, max_cache),
        rng=make_rng(seed),
        schedule=schedule or StepSchedule(),
        record_attention=record_attention,
    )


def enqueue_switch(session: Session, cmd: SwitchCommand) -> None:
    if cmd.target_chunk < max(1, session.chunk_index):
        raise ValueError(f"switch target chunk {cmd.target_chunk} is not after the current chunk {session.chunk_index - 1}")
    session.events.extend(cmd.events())


def _apply(session: Session, ev: CacheEvent) -> None:
    if ev.kind == "refresh":
        g = np.asarray(ev.garment)
        g = np.broadcast_to(g, session.cache.garment_latent.shape)
        session.cache = garment_refresh(session.cache, g, session.model)
    elif ev.kind == "withdraw":
        session.cache = historical_withdraw(session.cache)
    else:
        session.cache = reference_disentangle(session.cache, session.last_frame, session.codec, session.model)


def step(session: Session) -> np.ndarray:
    """Generate the next chunk; returns latents (B, chunk, P, C)."""
    if session.failed:
        raise SessionFailed("session already failed")
    due = [e for e in session.events if e.chunk == session.chunk_index]
    session.events = [e for e in session.events if e.chunk != session.chunk_index]
    for ev in order_events(due):
        _apply(session, ev)
    cfg = session.model.cfg
    B = session.cache.reference_latent.shape[0]
    frames = np.arange(session.next_frame, session.next_frame + cfg.chunk)
    noise = session.rng.standard_normal((B, cfg.chunk, cfg.tokens, cfg.channels))
    cache_layout = session.cache.layout()
    t0 = time.perf_counter()
    try:
        x0, attn = denoise_chunk(session.model, session.cache, frames, noise, session.schedule, session.rng, record_attention=session.record_attention)
    except FloatingPointError as exc:
        session.failed = True
        raise SessionFailed(f"non-finite output at chunk {session.chunk_index}") from exc
    if not np.isfinite(x0).all():
        session.failed = True
        raise SessionFailed(f"non-finite output at chunk {session.chunk_index}")
    session.cache = commit_chunk(session.model, session.cache, x0, frames)
    elapsed = time.perf_counter() - t0
    row = {
        "chunk": session.chunk_index,
        "retained_frames": session.cache.retained_frames(),
        "event": "+".join(e.kind for e in order_events(due)) or "none",
        "cache_slots": session.cache.size(),
        "step_seconds": elapsed,
    }
    if attn is not None:
        row.update(attention_mass(cache_layout, attn))
    session.trace.append(row)
    session.outputs.append(x0)
    session.chunk_index += 1
    return x0


def run(session: Session, num_chunks: int) -> np.ndarray:
    for _ in range(num_chunks):
        step(session)
    return session.stream()


def parse_switch_line(line: str, default_chunk: int | None = None) -> tuple[int, int, bool, bool] | None:
    """Parse ``chunk_index garment_id [--no-withdraw] [--no-disentangle]``.

    With ``default_chunk`` set the chunk index may be omitted (interactive
    input, timestamped to the next boundary). Blank lines and ``#`` comments
    give ``None``.
    """
    words = line.split("#", 1)[0].split()
    if not words:
        return None
    flags = [w for w in words if w.startswith("--")]
    nums = [w for w in words if not w.startswith("--")]
    unknown = set(flags) - {"--no-withdraw", "--no-disentangle"}
    if unknown:
        raise ValueError(f"unknown switch flag(s) {sorted(unknown)}")
    if len(nums) == 1 and default_chunk is not None:
        nums = [str(default_chunk)] + nums
    if len(nums) != 2:
        raise ValueError(f"expected 'chunk_index garment_id [flags]', got {line.strip()!r}")
    return int(nums[0]), int(nums[1]), "--no-withdraw" not in flags, "--no-disentangle" not in flags
