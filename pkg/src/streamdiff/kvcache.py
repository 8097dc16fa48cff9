"""KV cache with pinned conditions, an attention sink and a FIFO rolling window.

After the cache has absorbed frames up to index ``k`` it holds

    [context, reference, garment, sink, rolling max(sink+1, k-M+4) .. k]

where ``M`` counts frame-equivalents: reference, garment, sink and every
rolling frame take one slot each (the context token is not counted). With the
sink at frame 0 this is exactly ``{0} U {max(1, k-M+4) .. k}``.

Caches are treated as values: every operation returns a new ``KvCache`` and
never mutates arrays it shares with the old one.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbone import ConditionSet
from .masking import CONTEXT, GARMENT, REFERENCE, VIDEO, TokenLayout, condition_layout, context_layout, video_layout

ROLES = ("context", "reference", "garment", "sink", "rolling")
EVENT_ORDER = {"refresh": 0, "withdraw": 1, "disentangle": 2}


@dataclass(frozen=True)
class CacheEntry:
    role: str
    frame: int  # -1 for condition entries
    kv: tuple  # per layer (K, V), each (B, H, n_tokens, d_k)


@dataclass(frozen=True)
class CacheEvent:
    kind: str  # "refresh" | "withdraw" | "disentangle"
    chunk: int
    garment: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in EVENT_ORDER:
            raise ValueError(f"unknown cache event {self.kind!r}")


def order_events(events) -> list[CacheEvent]:
    """Refresh -> Withdraw -> Disentangle, regardless of queueing order."""
    return sorted(events, key=lambda e: (e.chunk, EVENT_ORDER[e.kind]))


def expected_retained(k: int, max_size: int | None, sink: int = 0) -> list[int]:
    """Frames the cache should hold after absorbing frame ``k``, in closed form."""
    if k < sink:
        return []
    lo = sink + 1 if max_size is None else max(sink + 1, k - max_size + 4)
    return [sink] + list(range(lo, k + 1))


@dataclass(frozen=True)
class KvCache:
    layers: int
    tokens: int
    chunk: int
    max_size: int | None = 23
    entries: tuple = ()
    reference_latent: np.ndarray | None = field(default=None, compare=False)
    garment_latent: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.max_size is not None and self.max_size < 4:
            raise ValueError("max cache size must leave room for conditions, sink and one rolling frame")

    # -- inspection -------------------------------------------------------

    def _find(self, role: str) -> CacheEntry | None:
        for e in self.entries:
            if e.role == role:
                return e
        return None

    @property
    def history(self) -> list[CacheEntry]:
        return [e for e in self.entries if e.role in ("sink", "rolling")]

    def retained_frames(self) -> list[int]:
        return [e.frame for e in self.history]

    @property
    def sink_frame(self) -> int | None:
        e = self._find("sink")
        return None if e is None else e.frame

    @property
    def last_frame(self) -> int | None:
        h = self.history
        return h[-1].frame if h else None

    def size(self) -> int:
        """Occupied frame-equivalents (context token excluded)."""
        return sum(1 for e in self.entries if e.role != "context")

    def num_tokens(self) -> int:
        return sum(e.kv[0][0].shape[2] for e in self.entries) if self.entries else 0

    def past_kv(self) -> list[tuple[np.ndarray, np.ndarray]]:
        if not self.entries:
            raise ValueError("cache is empty; install conditions first")
        return [
            (
                np.concatenate([e.kv[l][0] for e in self.entries], axis=2),
                np.concatenate([e.kv[l][1] for e in self.entries], axis=2),
            )
            for l in range(self.layers)
        ]

    def layout(self) -> TokenLayout:
        parts = []
        for e in self.entries:
            if e.role == "context":
                parts.append(context_layout())
            elif e.role == "reference":
                parts.append(condition_layout(self.tokens).select(slice(0, self.tokens)))
            elif e.role == "garment":
                parts.append(condition_layout(self.tokens).select(slice(self.tokens, 2 * self.tokens)))
            else:
                parts.append(video_layout([e.frame], self.tokens, self.chunk))
        return TokenLayout.concat(*parts)

    def check_invariants(self) -> None:
        roles = [e.role for e in self.entries]
        for r in ("context", "reference", "garment", "sink"):
            if roles.count(r) > 1:
                raise AssertionError(f"more than one {r} entry")
        rolling = [e.frame for e in self.entries if e.role == "rolling"]
        if rolling and rolling != list(range(rolling[0], rolling[-1] + 1)):
            raise AssertionError(f"rolling frames not contiguous: {rolling}")
        if self.max_size is not None and self.size() > self.max_size:
            raise AssertionError(f"cache holds {self.size()} > M={self.max_size} slots")

    # -- updates ----------------------------------------------------------

    def with_conditions(self, kv: list, reference_latent: np.ndarray, garment_latent: np.ndarray) -> "KvCache":
        """Install (or replace) context, reference and garment entries from ``condition_kv`` output."""
        P = self.tokens
        spans = {"context": slice(0, 1), "reference": slice(1, 1 + P), "garment": slice(1 + P, 1 + 2 * P)}
        cond = [
            CacheEntry(role, -1, tuple((k[:, :, s], v[:, :, s]) for k, v in kv)) for role, s in spans.items()
        ]
        return replace(
            self,
            entries=tuple(cond) + tuple(self.history),
            reference_latent=np.array(reference_latent),
            garment_latent=np.array(garment_latent),
        )

    def _replace_entry(self, new: CacheEntry) -> "KvCache":
        return replace(self, entries=tuple(new if e.role == new.role else e for e in self.entries))

    def append_and_evict(self, frames_kv: list, k: int) -> "KvCache":
        """Append per-frame K/V (``[(frame, kv_per_layer), ...]``) and apply FIFO eviction.

        ``k`` is the latest appended frame index.
        """
        if not frames_kv:
            return self
        frames = [f for f, _ in frames_kv]
        if frames != list(range(frames[0], frames[0] + len(frames))) or frames[-1] != k:
            raise ValueError(f"appended frames {frames} are not contiguous up to k={k}")
        last = self.last_frame
        if last is not None and frames[0] != last + 1:
            raise ValueError(f"append starts at frame {frames[0]} but cache ends at {last}")
        entries = list(self.entries)
        for f, kv in frames_kv:
            role = "rolling" if any(e.role == "sink" for e in entries) else "sink"
            entries.append(CacheEntry(role, f, tuple(kv)))
        if self.max_size is not None:
            # FIFO: drop the oldest rolling frame until the slot budget fits
            size = sum(1 for e in entries if e.role != "context")
            while size > self.max_size:
                oldest = next(i for i, e in enumerate(entries) if e.role == "rolling")
                del entries[oldest]
                size -= 1
        return replace(self, entries=tuple(entries))


def split_frames(kv: list, frames, tokens: int) -> list:
    """Cut per-layer K/V of consecutive video frames into ``[(frame, kv), ...]``."""
    out = []
    for i, f in enumerate(frames):
        s = slice(i * tokens, (i + 1) * tokens)
        out.append((int(f), tuple((k[:, :, s], v[:, :, s]) for k, v in kv)))
    return out


def garment_refresh(cache: KvCache, new_garment: np.ndarray, backbone) -> KvCache:
    """Swap in the K/V of a new garment image; every other entry is untouched."""
    if cache._find("garment") is None:
        raise ValueError("cache has no garment entry to refresh")
    kv = backbone.condition_kv(ConditionSet(cache.reference_latent, new_garment))
    P = cache.tokens
    s = slice(1 + P, 1 + 2 * P)
    entry = CacheEntry("garment", -1, tuple((k[:, :, s], v[:, :, s]) for k, v in kv))
    return replace(cache._replace_entry(entry), garment_latent=np.array(new_garment))


def historical_withdraw(cache: KvCache) -> KvCache:
    """Drop the sink and every rolling entry; conditions stay."""
    return replace(cache, entries=tuple(e for e in cache.entries if e.role not in ("sink", "rolling")))


def reference_disentangle(cache: KvCache, last_latent_frame: np.ndarray | None, codec, backbone) -> KvCache:
    """Make the last generated frame the new reference.

    The frame is decoded, its final pixel frame re-encoded as a single image,
    and the condition K/V recomputed. The garment entry is recomputed as well
    because garment tokens attend the reference.
    """
    if last_latent_frame is None:
        raise ValueError("reference disentangle needs the last generated latent frame")
    z = np.asarray(last_latent_frame)
    batched = z.ndim == 3
    zb = z if batched else z[None]
    new_ref = np.stack([codec.reencode_last_frame(zi) for zi in zb])
    kv = backbone.condition_kv(ConditionSet(new_ref, cache.garment_latent))
    P = cache.tokens
    new = cache
    for role, s in (("reference", slice(1, 1 + P)), ("garment", slice(1 + P, 1 + 2 * P))):
        new = new._replace_entry(CacheEntry(role, -1, tuple((k[:, :, s], v[:, :, s]) for k, v in kv)))
    return replace(new, reference_latent=new_ref)


def attention_mass(cache_layout: TokenLayout, attention: list[np.ndarray] | None) -> dict[str, float]:
    """Average attention mass of the new chunk's queries per column group.

    ``attention`` holds per-layer weights (B, H, Nq, N_cache + Nq) from the most
    recent incremental forward. Context, reference and garment columns count
    as conditional; sink and rolling columns as historical; the rest is the
    chunk itself.
    """
    if not attention:
        raise ValueError("no recorded attention weights")
    n_cache = len(cache_layout)
    role = cache_layout.role
    cond_cols = np.flatnonzero(np.isin(role, (CONTEXT, REFERENCE, GARMENT)))
    hist_cols = np.flatnonzero(role == VIDEO)
    w = np.stack([a for a in attention])  # (L, B, H, Nq, Nk)
    cond = w[..., cond_cols].sum(-1).mean()
    hist = w[..., hist_cols].sum(-1).mean() if len(hist_cols) else 0.0
    intra = w[..., n_cache:].sum(-1).mean()
    return {"conditional_mass": float(cond), "historical_mass": float(hist), "intra_mass": float(intra)}


def write_trace_csv(path, rows: list[dict]) -> None:
    fields = ["chunk", "retained_frames", "event", "conditional_mass", "historical_mass", "cache_slots"]
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            r = dict(r)
            r["retained_frames"] = " ".join(str(f) for f in r.get("retained_frames", []))
            w.writerow(r)
