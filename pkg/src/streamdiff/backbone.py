"""Toy diffusion transformer over the unified condition + video token sequence.

All roles share one set of projections. Each token is embedded as

    x @ W_in + role + slot-in-frame + time(t) [+ sinusoid(frame index) for video]

and the single context token (a stand-in for a text prompt) is a learned
vector. Blocks are pre-norm attention + GELU MLP. Every forward exposes the
per-layer keys and values of the tokens it processed so that they can be
cached.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masking import (
    CLEAN,
    CONTEXT,
    VIDEO,
    AttentionMask,
    attention_rules,
    build_full_mask,
    TokenLayout,
    condition_layout,
    context_layout,
    video_layout,
)
from .rng import make_rng


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 2
    heads: int = 2
    head_dim: int = 8
    d_model: int = 16
    tokens: int = 4
    channels: int = 16
    mlp_ratio: int = 4
    time_dim: int = 16
    chunk: int = 3

    def __post_init__(self):
        if self.heads * self.head_dim != self.d_model:
            raise ValueError(f"heads*head_dim={self.heads * self.head_dim} != d_model={self.d_model}")
        if self.d_model % 2 or self.time_dim % 2:
            raise ValueError("d_model and time_dim must be even for the sinusoidal embeddings")


@dataclass(frozen=True)
class ConditionSet:
    """Clean reference and garment latents, each (B, P, C)."""

    reference: np.ndarray
    garment: np.ndarray

    def __post_init__(self):
        ref = np.asarray(self.reference, dtype=np.float64)
        gar = np.asarray(self.garment, dtype=np.float64)
        if ref.ndim == 2:
            ref = ref[None]
        if gar.ndim == 2:
            gar = gar[None]
        if ref.shape != gar.shape:
            raise ValueError(f"reference {ref.shape} and garment {gar.shape} shapes differ")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "garment", gar)

    @property
    def batch(self) -> int:
        return self.reference.shape[0]


@dataclass(frozen=True)
class UnifiedSequence:
    x: np.ndarray  # (B, N, C); context rows are ignored
    t: np.ndarray  # (B, N)
    layout: TokenLayout

    def __len__(self) -> int:
        return self.x.shape[1]

    @staticmethod
    def concat(*parts: "UnifiedSequence") -> "UnifiedSequence":
        return UnifiedSequence(
            np.concatenate([p.x for p in parts], axis=1),
            np.concatenate([p.t for p in parts], axis=1),
            TokenLayout.concat(*(p.layout for p in parts)),
        )

    @property
    def video_index(self) -> np.ndarray:
        return np.flatnonzero(self.layout.role == VIDEO)


def context_block(batch: int, channels: int) -> UnifiedSequence:
    return UnifiedSequence(np.zeros((batch, 1, channels)), np.zeros((batch, 1)), context_layout())


def condition_block(cond: ConditionSet, half: int = CLEAN) -> UnifiedSequence:
    B, P, C = cond.reference.shape
    x = np.concatenate([cond.reference, cond.garment], axis=1)
    return UnifiedSequence(x, np.zeros((B, 2 * P)), condition_layout(P, half))


def video_block(latents: np.ndarray, t, frames, chunk: int, half: int = CLEAN) -> UnifiedSequence:
    """latents (B, n, P, C); t scalar, (n,) or (B, n)."""
    B, n, P, C = latents.shape
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B, n)) if np.ndim(t) < 2 else np.asarray(t, dtype=np.float64)
    return UnifiedSequence(
        latents.reshape(B, n * P, C), np.repeat(t, P, axis=1), video_layout(frames, P, chunk, half)
    )


def sinusoid(values: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    half = dim // 2
    freqs = base ** (-np.arange(half) / half)
    ang = values[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class ForwardResult:
    pred: Tensor  # (B, n_video, C) predictions for the video tokens, in sequence order
    kv: list[tuple[np.ndarray, np.ndarray]]  # per layer, each (B, H, N, d_k) for the processed tokens
    attention: list[np.ndarray] | None = field(default=None)  # per layer (B, H, Nq, Nk)


def init_params(cfg: BackboneConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = make_rng(seed)
    D, C, Dt = cfg.d_model, cfg.channels, cfg.time_dim
    Hd = cfg.mlp_ratio * D

    def w(fan_in, *shape, gain=1.0):
        return Tensor(rng.standard_normal(shape) * gain / np.sqrt(fan_in))

    p = {
        "embed.in.w": w(C, C, D),
        "embed.in.b": Tensor(np.zeros(D)),
        "embed.role": Tensor(rng.standard_normal((4, D)) * 0.1),
        "embed.slot": Tensor(rng.standard_normal((cfg.tokens, D)) * 0.1),
        "embed.context": Tensor(rng.standard_normal(D) * 0.1),
        "embed.time.w1": w(Dt, Dt, D),
        "embed.time.b1": Tensor(np.zeros(D)),
        "embed.time.w2": w(D, D, D),
        "embed.time.b2": Tensor(np.zeros(D)),
    }
    for l in range(cfg.layers):
        pre = f"blocks.{l}."
        p[pre + "ln1.g"] = Tensor(np.ones(D))
        p[pre + "ln1.b"] = Tensor(np.zeros(D))
        for name in ("wq", "wk", "wv"):
            p[pre + "attn." + name] = w(D, D, D)
        p[pre + "attn.wo"] = w(D, D, D, gain=0.5)
        p[pre + "ln2.g"] = Tensor(np.ones(D))
        p[pre + "ln2.b"] = Tensor(np.zeros(D))
        p[pre + "mlp.w1"] = w(D, D, Hd)
        p[pre + "mlp.b1"] = Tensor(np.zeros(Hd))
        p[pre + "mlp.w2"] = w(Hd, Hd, D, gain=0.5)
        p[pre + "mlp.b2"] = Tensor(np.zeros(D))
    p["head.ln.g"] = Tensor(np.ones(D))
    p["head.ln.b"] = Tensor(np.zeros(D))
    p["head.w"] = w(D, D, C, gain=0.5)
    p["head.b"] = Tensor(np.zeros(C))
    return p


class Backbone:
    """Parameters plus the forward passes used by every training stage and the sampler."""

    def __init__(self, cfg: BackboneConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def copy(self) -> "Backbone":
        return Backbone(self.cfg, {k: Tensor(v.data.copy()) for k, v in self.params.items()})

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)}")
        for k in self.params:
            if state[k].shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {self.params[k].shape}")
            self.params[k] = Tensor(np.array(state[k]))

    # -- core -------------------------------------------------------------

    def _embed(self, seq: UnifiedSequence) -> Tensor:
        p, cfg = self.params, self.cfg
        lay = seq.layout
        B = seq.x.shape[0]
        h = seq.x @ p["embed.in.w"] + p["embed.in.b"]
        h = h + p["embed.role"][lay.role] + p["embed.slot"][lay.token]
        temb = sinusoid(seq.t * 1000.0, cfg.time_dim)
        temb = ad.gelu(temb @ p["embed.time.w1"] + p["embed.time.b1"]) @ p["embed.time.w2"] + p["embed.time.b2"]
        h = h + temb
        vid = (lay.role == VIDEO)[:, None]
        h = h + np.where(vid, sinusoid(np.maximum(lay.frame, 0), cfg.d_model, base=1000.0), 0.0)
        ctx = (lay.role == CONTEXT)[None, :, None]
        if ctx.any():
            keep = np.where(ctx, 0.0, 1.0)
            h = h * keep + ad.mul(np.broadcast_to(1.0 - keep, (B, len(lay), 1)), p["embed.context"])
        return h

    def run(
        self,
        seq: UnifiedSequence,
        allowed: np.ndarray,
        past: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
        record_attention: bool = False,
    ) -> tuple[Tensor, list, list | None]:
        """Forward over ``seq`` whose tokens attend ``[past | seq]`` under ``allowed``.

        Returns the head output for every token of ``seq``, the per-layer K/V
        of ``seq``'s tokens and optionally the attention weights.
        """
        p, cfg = self.params, self.cfg
        B, N, _ = seq.x.shape
        H, dk, D = cfg.heads, cfg.head_dim, cfg.d_model
        n_past = 0 if past is None else past[0][0].shape[2]
        if past is not None and len(past) != cfg.layers:
            raise ValueError(f"cache has {len(past)} layers, model has {cfg.layers}")
        if allowed.shape != (N, n_past + N):
            raise ValueError(f"mask shape {allowed.shape} does not match ({N}, {n_past + N})")
        if not allowed.any(axis=1).all():
            raise ValueError("mask has a row with no allowed entries")
        scale = 1.0 / np.sqrt(dk)
        h = self._embed(seq)
        kvs, attn = [], [] if record_attention else None
        for l in range(cfg.layers):
            pre = f"blocks.{l}."
            a = ad.layer_norm(h) * p[pre + "ln1.g"] + p[pre + "ln1.b"]
            q = (a @ p[pre + "attn.wq"]).reshape(B, N, H, dk).transpose(0, 2, 1, 3)
            k = (a @ p[pre + "attn.wk"]).reshape(B, N, H, dk).transpose(0, 2, 1, 3)
            v = (a @ p[pre + "attn.wv"]).reshape(B, N, H, dk).transpose(0, 2, 1, 3)
            kvs.append((k.data, v.data))
            if n_past:
                pk, pv = past[l]
                k = ad.concat([pk, k], axis=2)
                v = ad.concat([pv, v], axis=2)
            scores = (q @ k.transpose(0, 1, 3, 2)) * scale
            w = ad.masked_softmax(scores, allowed)
            if record_attention:
                attn.append(w.data)
            o = (w @ v).transpose(0, 2, 1, 3).reshape(B, N, D)
            h = h + o @ p[pre + "attn.wo"]
            m = ad.layer_norm(h) * p[pre + "ln2.g"] + p[pre + "ln2.b"]
            h = h + ad.gelu(m @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]) @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]
        out = (ad.layer_norm(h) * p["head.ln.g"] + p["head.ln.b"]) @ p["head.w"] + p["head.b"]
        return out, kvs, attn

    def forward(self, seq: UnifiedSequence, mask: AttentionMask | np.ndarray, record_attention: bool = False) -> ForwardResult:
        allowed = mask.allowed if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
        if allowed.shape != (len(seq), len(seq)):
            raise ValueError(f"mask shape {allowed.shape} != sequence length {len(seq)} squared")
        out, kvs, attn = self.run(seq, allowed, None, record_attention)
        return ForwardResult(out[:, seq.video_index], kvs, attn)

    def forward_incremental(
        self, seq_new: UnifiedSequence, cache, chunk_mask: np.ndarray | None = None, record_attention: bool = False
    ) -> ForwardResult:
        """New tokens attend every cached K/V plus themselves under ``chunk_mask``."""
        past = cache.past_kv()
        if len(past) != self.cfg.layers:
            raise ValueError(f"cache has {len(past)} layers, model has {self.cfg.layers}")
        n_new = len(seq_new)
        n_past = past[0][0].shape[2]
        if chunk_mask is None:
            chunk_mask = np.ones((n_new, n_new), dtype=bool)
        allowed = np.concatenate([np.ones((n_new, n_past), dtype=bool), chunk_mask], axis=1)
        out, kvs, attn = self.run(seq_new, allowed, past, record_attention)
        return ForwardResult(out[:, seq_new.video_index], kvs, attn)

    def condition_kv(self, cond: ConditionSet) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-layer K/V of ``[context | reference | garment]`` with causal condition order."""
        seq = UnifiedSequence.concat(context_block(cond.batch, self.cfg.channels), condition_block(cond))
        allowed = attention_rules(seq.layout, seq.layout)
        _, kvs, _ = self.run(seq, allowed)
        return kvs

    # -- convenience wrappers ---------------------------------------------

    def velocity(self, video: np.ndarray, t, cond: ConditionSet, frames=None, mask=None) -> Tensor:
        """Bidirectional (teacher) prediction for a clip ``video`` (B, f, P, C)."""
        B, f, P, C = video.shape
        frames = np.arange(f) if frames is None else np.asarray(frames)
        seq = UnifiedSequence.concat(
            context_block(B, C), condition_block(cond), video_block(video, t, frames, max(f, 1))
        )
        if mask is None:
            mask = build_full_mask(f, P)
        return self.forward(seq, mask).pred.reshape(B, f, P, C)


def with_config(cfg: BackboneConfig, **changes) -> BackboneConfig:
    return replace(cfg, **changes)
