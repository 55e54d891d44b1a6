"""Modality weaving: one token-aligned stream of text and audio embeddings.

The text sequence reserves a contiguous block of ``AUDIO_EMBED`` placeholders.
Their embeddings are overwritten in place by ``align(features) @ W`` so the
sequence length and every other position are left untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import torch

from .attention import AttentionPattern, DEFAULT_STRIDE, DEFAULT_WINDOW, build_anchor_set, build_global_set
from .errors import InvalidArgument, NumericInputError

# reserved text vocabulary
PAD, CLS, DESCRIPTION, SEP, AUDIO_EMBED, UNK = range(6)
SPECIAL_IDS = frozenset({PAD, CLS, DESCRIPTION, SEP, AUDIO_EMBED})

DEFAULT_P_TEXT = 0.2
DEFAULT_P_AUDIO = 0.1


@dataclass(frozen=True)
class FeatureBlock:
    frames: torch.Tensor  # (T~, D)

    def __post_init__(self):
        f = torch.as_tensor(self.frames)
        if f.dim() != 2:
            raise InvalidArgument(f"frames must be 2-D, got shape {tuple(f.shape)}")
        if torch.isnan(f).any():
            raise NumericInputError("NaN in audio features")
        object.__setattr__(self, "frames", f)

    @property
    def source_len(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class WeaveLayout:
    cls_pos: int
    desc_pos: int
    audio_start: int
    T: int

    @property
    def audio_range(self) -> range:
        return range(self.audio_start, self.audio_start + self.T)


@dataclass(frozen=True)
class WovenSequence:
    embeddings: torch.Tensor  # (n, H), or (B, n, H) for a batch sharing one layout
    token_ids: torch.Tensor  # (n,) or (B, n)
    audio_span: tuple[int, int]  # (start, length)
    global_flags: torch.Tensor  # (n,)
    attention_pattern: AttentionPattern

    @property
    def seq_len(self) -> int:
        return self.token_ids.shape[-1]


def align_features(frames, T: int) -> torch.Tensor:
    """Head-crop or zero-pad ``frames`` to exactly ``T`` rows."""
    if T < 1:
        raise InvalidArgument(f"T must be >= 1, got {T}")
    f = frames.frames if isinstance(frames, FeatureBlock) else torch.as_tensor(frames)
    if f.shape[-2] >= T:
        return f[..., :T, :]
    pad = torch.zeros(*f.shape[:-2], T - f.shape[-2], f.shape[-1], dtype=f.dtype)
    return torch.cat([f, pad], dim=-2)


def project_audio(aligned: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    if aligned.shape[-1] != W.shape[0]:
        raise InvalidArgument(f"feature dim {aligned.shape[-1]} != W rows {W.shape[0]}")
    return aligned.to(W.dtype) @ W


def layout_pattern(layout: WeaveLayout, seq_len: int, window: int = DEFAULT_WINDOW,
                   stride: int = DEFAULT_STRIDE, cls_global: bool = True) -> AttentionPattern:
    """Attention pattern for a woven layout.

    ``cls_global=False`` drops [CLS] from the global set; used only by
    reachability probes.
    """
    anchors = build_anchor_set(layout.T, stride)
    g = build_global_set(layout.cls_pos, layout.desc_pos, layout.audio_start, anchors, seq_len=seq_len)
    if not cls_global:
        g = tuple(i for i in g if i != layout.cls_pos)
    return AttentionPattern(seq_len=seq_len, window=window, global_set=g,
                            audio_span=(layout.audio_start, layout.T))


def _check_layout(token_ids: torch.Tensor, layout: WeaveLayout):
    n = token_ids.shape[-1]
    a0, a1 = layout.audio_start, layout.audio_start + layout.T
    if a0 < 0 or a1 > n:
        raise InvalidArgument(f"audio span [{a0}, {a1}) outside sequence of length {n}")
    for name, pos in (("cls_pos", layout.cls_pos), ("desc_pos", layout.desc_pos)):
        if not 0 <= pos < n:
            raise InvalidArgument(f"{name}={pos} out of range")
        if a0 <= pos < a1:
            raise InvalidArgument(f"{name}={pos} overlaps the audio span")
    if layout.cls_pos == layout.desc_pos:
        raise InvalidArgument("cls_pos and desc_pos overlap")
    if not bool((token_ids[..., a0:a1] == AUDIO_EMBED).all()):
        raise InvalidArgument("audio span is not reserved with AUDIO_EMBED placeholders")


def weave(text_tokens, text_embed, audio, W: torch.Tensor, layout: WeaveLayout,
          anchor_stride: int = DEFAULT_STRIDE, window: int = DEFAULT_WINDOW) -> WovenSequence:
    """Build the woven stream.

    ``text_tokens`` is ``(n,)`` or ``(B, n)``; ``audio`` a :class:`FeatureBlock`
    or a ``(T~, D)`` / ``(B, T~, D)`` tensor. ``text_embed`` is an embedding
    table (tensor or ``nn.Embedding``).
    """
    ids = torch.as_tensor(text_tokens, dtype=torch.long)
    _check_layout(ids, layout)
    table = text_embed.weight if isinstance(text_embed, torch.nn.Embedding) else text_embed
    emb = table[ids]
    frames = audio.frames if isinstance(audio, FeatureBlock) else torch.as_tensor(audio)
    E_a = project_audio(align_features(frames, layout.T), W).to(emb.dtype)
    a0, a1 = layout.audio_start, layout.audio_start + layout.T
    emb = torch.cat([emb[..., :a0, :], E_a, emb[..., a1:, :]], dim=-2)
    n = ids.shape[-1]
    pattern = layout_pattern(layout, n, window=window, stride=anchor_stride)
    flags = torch.as_tensor(pattern.global_flags)
    return WovenSequence(emb, ids, (layout.audio_start, layout.T), flags, pattern)


def _drop_probs(token_ids: torch.Tensor, audio_span: tuple[int, int], p_text: float,
                p_audio: float) -> torch.Tensor:
    """Per-position drop probability: p_audio on audio rows, p_text on plain text, 0 on specials."""
    probs = torch.full(token_ids.shape, float(p_text), dtype=torch.float64)
    for sid in SPECIAL_IDS:
        probs[token_ids == sid] = 0.0
    start, length = audio_span
    probs[..., start:start + length] = float(p_audio)
    return probs


def dropout_keep_mask(token_ids: torch.Tensor, audio_span: tuple[int, int], p_text: float,
                      p_audio: float, seed: int) -> torch.Tensor:
    """Boolean keep mask with the shape of ``token_ids``."""
    for p in (p_text, p_audio):
        if not 0.0 <= p <= 1.0:
            raise InvalidArgument(f"dropout probability {p} outside [0, 1]")
    gen = torch.Generator().manual_seed(int(seed))
    u = torch.rand(token_ids.shape, generator=gen, dtype=torch.float64)
    return ~(u < _drop_probs(token_ids, audio_span, p_text, p_audio))


def modality_dropout(seq: WovenSequence, p_text: float = DEFAULT_P_TEXT, p_audio: float = DEFAULT_P_AUDIO,
                     seed: int = 0, training: bool = True, rescale: bool = False) -> WovenSequence:
    """Zero whole text-token rows and audio-frame rows.

    Rows are zeroed rather than removed so positions (and thus the attention
    pattern) stay fixed. Special tokens are never dropped. No-op when
    ``training`` is false.
    """
    if not training:
        return seq
    keep = dropout_keep_mask(seq.token_ids, seq.audio_span, p_text, p_audio, seed)
    scale = keep.to(seq.embeddings.dtype)
    if rescale:
        probs = _drop_probs(seq.token_ids, seq.audio_span, p_text, p_audio)
        scale = scale / (1.0 - probs).clamp_min(1e-12).to(scale.dtype)
    return replace(seq, embeddings=seq.embeddings * scale.unsqueeze(-1))


def reserve_layout(text_ids: Sequence[int], max_text: int, T: int) -> tuple[list[int], WeaveLayout]:
    """Lay out ``[CLS] [DESCRIPTION] text.. [SEP] AUDIO_EMBED * T``.

    Text is truncated or PAD-filled to ``max_text`` tokens so every sequence
    built with the same (max_text, T) shares one layout.
    """
    text = list(text_ids)[:max_text]
    text += [PAD] * (max_text - len(text))
    ids = [CLS, DESCRIPTION, *text, SEP] + [AUDIO_EMBED] * T
    return ids, WeaveLayout(cls_pos=0, desc_pos=1, audio_start=max_text + 3, T=T)
