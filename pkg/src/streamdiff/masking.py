"""Boolean attention masks over the unified token sequence.

Token order is always ``[context | reference | garment | video ...]``; the
teacher-forcing layout appends a noisy copy of the video (and, optionally, of
the condition pair) after the clean half. ``True`` means attention allowed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CONTEXT, REFERENCE, GARMENT, VIDEO = 0, 1, 2, 3
CLEAN, NOISY = 0, 1


@dataclass(frozen=True)
class TokenLayout:
    """Per-token metadata.

    ``frame`` is the video frame index (-1 for conditions), ``chunk`` the
    frame's chunk, ``half`` clean/noisy and ``token`` the slot within a frame.
    """

    role: np.ndarray
    frame: np.ndarray
    chunk: np.ndarray
    half: np.ndarray
    token: np.ndarray

    def __len__(self) -> int:
        return len(self.role)

    @staticmethod
    def concat(*parts: "TokenLayout") -> "TokenLayout":
        return TokenLayout(*(np.concatenate([getattr(p, k) for p in parts]) for k in _FIELDS))

    def select(self, idx) -> "TokenLayout":
        return TokenLayout(*(getattr(self, k)[idx] for k in _FIELDS))

    @property
    def is_condition(self) -> np.ndarray:
        return self.role != VIDEO


_FIELDS = ("role", "frame", "chunk", "half", "token")


def context_layout() -> TokenLayout:
    return TokenLayout(np.array([CONTEXT]), np.array([-1]), np.array([-1]), np.array([CLEAN]), np.array([0]))


def condition_layout(tokens: int, half: int = CLEAN) -> TokenLayout:
    role = np.repeat([REFERENCE, GARMENT], tokens)
    n = len(role)
    return TokenLayout(role, np.full(n, -1), np.full(n, -1), np.full(n, half), np.tile(np.arange(tokens), 2))


def video_layout(frames, tokens: int, chunk: int, half: int = CLEAN) -> TokenLayout:
    frames = np.asarray(frames, dtype=int)
    per_token = np.repeat(frames, tokens)
    n = len(per_token)
    return TokenLayout(
        np.full(n, VIDEO), per_token, per_token // chunk, np.full(n, half), np.tile(np.arange(tokens), len(frames))
    )


@dataclass(frozen=True)
class AttentionMask:
    allowed: np.ndarray  # (rows, cols) bool
    rows: TokenLayout
    cols: TokenLayout

    @property
    def shape(self) -> tuple[int, int]:
        return self.allowed.shape

    def restrict(self, row_idx, col_idx) -> "AttentionMask":
        row_idx, col_idx = np.asarray(row_idx), np.asarray(col_idx)
        return AttentionMask(self.allowed[np.ix_(row_idx, col_idx)], self.rows.select(row_idx), self.cols.select(col_idx))


def attention_rules(q: TokenLayout, k: TokenLayout) -> np.ndarray:
    qr, kr = q.role[:, None], k.role[None, :]
    qh, kh = q.half[:, None], k.half[None, :]
    qc, kc = q.chunk[:, None], k.chunk[None, :]
    k_ctx = kr == CONTEXT
    k_cond = (kr == REFERENCE) | (kr == GARMENT)
    # conditions: context, then reference -> garment causal within their own pair
    cond_rows = (
        ((qr == REFERENCE) & (k_ctx | ((kr == REFERENCE) & (kh == qh))))
        | ((qr == GARMENT) & (k_ctx | (k_cond & (kh == qh))))
        | ((qr == CONTEXT) & k_ctx)
    )
    q_vid, k_vid = qr == VIDEO, kr == VIDEO
    clean_rows = (q_vid & (qh == CLEAN)) & (
        k_ctx | (k_cond & (kh == CLEAN)) | (k_vid & (kh == CLEAN) & (kc <= qc))
    )
    noisy_rows = (q_vid & (qh == NOISY)) & (
        k_ctx | k_cond | (k_vid & (kh == CLEAN) & (kc < qc)) | (k_vid & (kh == NOISY) & (kc == qc))
    )
    return cond_rows | clean_rows | noisy_rows


def tf_layout(f: int, tokens: int, chunk: int, duplicate_conditions: bool = True) -> TokenLayout:
    frames = np.arange(f)
    parts = [context_layout(), condition_layout(tokens, CLEAN), video_layout(frames, tokens, chunk, CLEAN)]
    if duplicate_conditions:
        parts.append(condition_layout(tokens, NOISY))
    parts.append(video_layout(frames, tokens, chunk, NOISY))
    return TokenLayout.concat(*parts)


def build_tf_mask(f: int, tokens: int, chunk: int, duplicate_conditions: bool = True) -> AttentionMask:
    """In-context teacher-forcing mask.

    Layout ``[ctx | src | gar | clean 0..f-1 | (src | gar) | noisy 0..f-1]``.
    Noisy frames see every condition token, clean frames of strictly earlier
    chunks and the noisy tokens of their own chunk. Clean frames see the
    clean-half conditions and clean frames up to their own chunk. Conditions
    never see video.

    With ``duplicate_conditions=False`` a single condition pair serves both
    halves, which makes noisy rows match the inference cache one-to-one.
    """
    if f < 1 or chunk < 1 or f % chunk:
        raise ValueError(f"frame count {f} not divisible by chunk size {chunk}")
    layout = tf_layout(f, tokens, chunk, duplicate_conditions)
    return AttentionMask(attention_rules(layout, layout), layout, layout)


def build_full_mask(f: int, tokens: int) -> AttentionMask:
    """Bidirectional teacher mask: video sees everything, conditions stay causal."""
    layout = TokenLayout.concat(context_layout(), condition_layout(tokens), video_layout(np.arange(f), tokens, max(f, 1)))
    allowed = attention_rules(layout, layout)
    vid = layout.role == VIDEO
    allowed[np.ix_(vid, vid)] = True
    return AttentionMask(allowed, layout, layout)


def build_inference_mask(k: int, chunk: int, tokens: int, retained_frames=None) -> AttentionMask:
    """Row policy for generating chunk ``k``.

    Columns are ``[ctx | src | gar | retained history | new chunk]``; the new
    chunk sees all of them (bidirectional inside the chunk). History defaults
    to every earlier frame.
    """
    if k < 0:
        raise ValueError("chunk index must be non-negative")
    if retained_frames is None:
        retained_frames = np.arange(k * chunk)
    new = np.arange(k * chunk, (k + 1) * chunk)
    rows = video_layout(new, tokens, chunk, NOISY)
    cols = TokenLayout.concat(
        context_layout(),
        condition_layout(tokens),
        video_layout(np.sort(np.asarray(retained_frames, dtype=int)), tokens, chunk, CLEAN),
        rows,
    )
    return AttentionMask(attention_rules(rows, cols), rows, cols)


def chunk_self_mask(chunk: int, tokens: int) -> np.ndarray:
    """Chunk-internal mask: every token of the chunk sees every other."""
    n = chunk * tokens
    return np.ones((n, n), dtype=bool)


def mask_to_text(mask: AttentionMask | np.ndarray) -> str:
    a = mask.allowed if isinstance(mask, AttentionMask) else np.asarray(mask)
    return "\n".join("".join("1" if x else "0" for x in row) for row in a) + "\n"


def mask_from_text(text: str) -> np.ndarray:
    return np.array([[c == "1" for c in line] for line in text.strip().splitlines()], dtype=bool)
