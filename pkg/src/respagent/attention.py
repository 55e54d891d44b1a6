"""Strategic-global sparse attention.

A query row ``i`` may score key ``j`` when ``|i - j| <= w`` (local window), when
``j`` is a global token, or when ``i`` itself is global (global rows see the
whole sequence). The global set is made of the ``[CLS]`` and ``[DESCRIPTION]``
positions plus stride-sampled audio anchors.

:func:`sparse_attention` gathers only allowed keys; :func:`dense_reference_attention`
is the O(n^2) masked oracle used to check it.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import InvalidArgument, NumericInputError

DEFAULT_WINDOW = 32
DEFAULT_STRIDE = 4


@dataclass(frozen=True)
class AttentionPattern:
    """Which (query, key) pairs are scored.

    ``audio_span`` is stored as ``(start, length)``, i.e. the half-open range
    ``[start, start + length)``.
    """

    seq_len: int
    window: int
    global_set: tuple[int, ...] = ()
    audio_span: tuple[int, int] = (0, 0)
    causal: bool = False

    def __post_init__(self):
        gs = tuple(int(g) for g in self.global_set)
        object.__setattr__(self, "global_set", tuple(sorted(gs)))
        object.__setattr__(self, "audio_span", tuple(int(a) for a in self.audio_span))
        if self.seq_len < 1:
            raise InvalidArgument(f"seq_len must be >= 1, got {self.seq_len}")
        if self.window < 1:
            raise InvalidArgument(f"window must be >= 1, got {self.window}")
        if len(set(gs)) != len(gs):
            raise InvalidArgument("global_set contains duplicates")
        if gs and (min(gs) < 0 or max(gs) >= self.seq_len):
            raise InvalidArgument("global index out of range")
        start, length = self.audio_span
        if start < 0 or length < 0 or start + length > self.seq_len:
            raise InvalidArgument(f"audio_span {self.audio_span} outside [0, {self.seq_len})")

    @property
    def global_flags(self) -> np.ndarray:
        flags = np.zeros(self.seq_len, dtype=bool)
        flags[list(self.global_set)] = True
        return flags

    def allowed(self, i: int) -> list[int]:
        """Sorted allowed key set A(i)."""
        n, w = self.seq_len, self.window
        hi = i if self.causal else n - 1
        if i in self.global_set:
            return list(range(0, hi + 1))
        keys = set(range(max(0, i - w), min(hi, i + w) + 1))
        keys.update(g for g in self.global_set if g <= hi)
        return sorted(keys)

    def to_dict(self) -> dict:
        return {
            "n": self.seq_len,
            "w": self.window,
            "global": list(self.global_set),
            "audio_span": list(self.audio_span),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionPattern":
        return cls(
            seq_len=int(d["n"]),
            window=int(d["w"]),
            global_set=tuple(d.get("global", ())),
            audio_span=tuple(d.get("audio_span", (0, 0))),
        )

    @classmethod
    def from_json(cls, text: str) -> "AttentionPattern":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class AnchorGrid:
    T: int
    s: int
    duration_ms: float
    hop_ms: float = field(init=False)
    spacing_ms: float = field(init=False)
    worst_dev_ms: float = field(init=False)

    def __post_init__(self):
        hop = self.duration_ms / self.T
        object.__setattr__(self, "hop_ms", hop)
        object.__setattr__(self, "spacing_ms", self.s * hop)
        object.__setattr__(self, "worst_dev_ms", self.s * hop / 2)


def build_anchor_set(T: int, s: int) -> tuple[int, ...]:
    """0-based anchor offsets ``k*s`` for ``k = 0 .. (T-1)//s``.

    The 1-based anchors ``a_1, a_{1+s}, ...`` shifted down by one.
    """
    if T < 1 or s < 1:
        raise InvalidArgument(f"T and s must be >= 1 (got T={T}, s={s})")
    return tuple(range(0, T, s))


def build_global_set(
    cls_pos: int,
    desc_pos: int,
    audio_start: int,
    anchors: Iterable[int],
    seq_len: int | None = None,
) -> tuple[int, ...]:
    if cls_pos == desc_pos:
        raise InvalidArgument("cls_pos and desc_pos must differ")
    g = {int(cls_pos), int(desc_pos)}
    g.update(int(audio_start) + int(a) for a in anchors)
    if min(g) < 0:
        raise InvalidArgument("negative index in global set")
    if seq_len is not None and max(g) >= seq_len:
        raise InvalidArgument(f"global index {max(g)} >= seq_len {seq_len}")
    return tuple(sorted(g))


def anchor_grid_stats(duration_ms: float, T: int, s: int) -> AnchorGrid:
    if not duration_ms > 0:
        raise InvalidArgument(f"duration_ms must be positive, got {duration_ms}")
    if T < 1 or s < 1:
        raise InvalidArgument(f"T and s must be >= 1 (got T={T}, s={s})")
    return AnchorGrid(T=T, s=s, duration_ms=float(duration_ms))


def _check_inputs(Q, K, V, pattern: AttentionPattern):
    if Q.shape[-2] != pattern.seq_len or K.shape[-2] != pattern.seq_len or V.shape[-2] != pattern.seq_len:
        raise InvalidArgument(
            f"sequence length mismatch: Q {tuple(Q.shape)}, K {tuple(K.shape)}, "
            f"V {tuple(V.shape)}, pattern n={pattern.seq_len}"
        )
    if Q.shape[-1] != K.shape[-1]:
        raise InvalidArgument(f"Q/K head dim mismatch: {Q.shape[-1]} vs {K.shape[-1]}")
    if Q.shape[:-2] != K.shape[:-2] or K.shape[:-2] != V.shape[:-2]:
        raise InvalidArgument("leading (batch/head) dims of Q, K, V differ")
    for name, x in (("Q", Q), ("K", K), ("V", V)):
        if torch.isnan(x).any():
            raise NumericInputError(f"NaN in {name}")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def _local_index(pattern: AttentionPattern, device) -> tuple[torch.Tensor, torch.Tensor]:
    """(n, width) key indices for the local band and a validity mask.

    Band entries that fall off the sequence, break causality, or duplicate a
    global column are invalid; their index is clamped to a key that is still
    inside the row's allowed set so no disallowed score is ever formed.
    """
    n, w = pattern.seq_len, pattern.window
    hi_off = 0 if pattern.causal else w
    offsets = torch.arange(-w, hi_off + 1, device=device)
    rows = torch.arange(n, device=device).unsqueeze(1)
    idx = rows + offsets
    valid = (idx >= 0) & (idx < n)
    if pattern.global_set:
        is_global = torch.zeros(n, dtype=torch.bool, device=device)
        is_global[list(pattern.global_set)] = True
        valid &= ~is_global[idx.clamp(0, n - 1)]
    idx = torch.where(valid, idx, rows.expand_as(idx))
    return idx, valid


def sparse_attention(Q, K, V, pattern: AttentionPattern, scale: float | None = None) -> torch.Tensor:
    """Attention restricted to the pattern, without materializing an n x n score matrix.

    Q, K: ``(..., n, d_k)``; V: ``(..., n, d_v)``. Leading dims (batch, heads)
    are carried through.
    """
    Q, K, V = _as_tensor(Q), _as_tensor(K), _as_tensor(V)
    _check_inputs(Q, K, V, pattern)
    n = pattern.seq_len
    if scale is None:
        scale = 1.0 / math.sqrt(Q.shape[-1])
    neg_inf = torch.finfo(Q.dtype).min

    idx, valid = _local_index(pattern, Q.device)
    width = idx.shape[1]
    flat = idx.reshape(-1)
    K_loc = K[..., flat, :].reshape(*K.shape[:-2], n, width, K.shape[-1])
    V_loc = V[..., flat, :].reshape(*V.shape[:-2], n, width, V.shape[-1])
    s_loc = torch.einsum("...id,...ijd->...ij", Q, K_loc) * scale
    s_loc = s_loc.masked_fill(~valid, neg_inf)

    g = list(pattern.global_set)
    if pattern.causal and g:
        raise InvalidArgument("causal patterns with global tokens are not supported")
    if g:
        g_idx = torch.tensor(g, device=Q.device)
        K_g = K[..., g_idx, :]
        V_g = V[..., g_idx, :]
        s_g = torch.einsum("...id,...jd->...ij", Q, K_g) * scale
        scores = torch.cat([s_loc, s_g], dim=-1)
        p = torch.softmax(scores, dim=-1)
        out = torch.einsum("...ij,...ijd->...id", p[..., :width], V_loc)
        out = out + p[..., width:] @ V_g
        # global rows attend everywhere
        s_full = (Q[..., g_idx, :] @ K.transpose(-1, -2)) * scale
        out_g = torch.softmax(s_full, dim=-1) @ V
        out = _scatter_rows(out, g_idx, out_g)
    else:
        p = torch.softmax(s_loc, dim=-1)
        out = torch.einsum("...ij,...ijd->...id", p, V_loc)
    return out


def _scatter_rows(out: torch.Tensor, rows: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    out = out.clone()
    out[..., rows, :] = values
    return out


def dense_mask(pattern: AttentionPattern) -> np.ndarray:
    """Boolean n x n matrix of allowed pairs (oracle only)."""
    n, w = pattern.seq_len, pattern.window
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    allowed = np.abs(i - j) <= w
    flags = pattern.global_flags
    allowed |= flags[None, :]
    allowed |= flags[:, None]
    if pattern.causal:
        allowed &= j <= i
    return allowed


def dense_reference_attention(Q, K, V, pattern: AttentionPattern, scale: float | None = None) -> torch.Tensor:
    Q, K, V = _as_tensor(Q), _as_tensor(K), _as_tensor(V)
    _check_inputs(Q, K, V, pattern)
    if scale is None:
        scale = 1.0 / math.sqrt(Q.shape[-1])
    allowed = torch.as_tensor(dense_mask(pattern), device=Q.device)
    bias = torch.zeros(allowed.shape, dtype=Q.dtype, device=Q.device)
    bias = bias.masked_fill(~allowed, torch.finfo(Q.dtype).min)
    scores = (Q @ K.transpose(-1, -2)) * scale + bias
    return torch.softmax(scores, dim=-1) @ V


def attention_cost(pattern: AttentionPattern) -> int:
    """Number of scored (query, key) pairs, sum_i |A(i)|, in O(n log |G|)."""
    n, w = pattern.seq_len, pattern.window
    g = pattern.global_set
    gset = set(g)
    total = 0
    for i in range(n):
        hi = i if pattern.causal else n - 1
        if i in gset:
            total += hi + 1
            continue
        lo_w, hi_w = max(0, i - w), min(hi, i + w)
        in_window = bisect_right(g, hi_w) - bisect_left(g, lo_w)
        reachable_g = bisect_right(g, hi)
        total += (hi_w - lo_w + 1) + (reachable_g - in_window)
    return total


def cost_probe(ns: Sequence[int], window: int, n_global: int) -> list[dict]:
    """Scored-pair counts at each ``n`` with a fixed global budget.

    Global tokens are the first ``n_global`` positions (2 sentinels then a
    stride-1 anchor run), which keeps |G| constant across ``n``.
    """
    rows = []
    for n in ns:
        if n_global > n:
            raise InvalidArgument(f"n_global {n_global} > n {n}")
        pat = AttentionPattern(seq_len=n, window=window, global_set=tuple(range(n_global)))
        rows.append({"n": n, "w": window, "g": n_global, "scored_pairs": attention_cost(pat)})
    return rows


def linear_fit_r2(x: Sequence[float], y: Sequence[float]) -> float:
    """R^2 of an ordinary least-squares line y ~ a + b x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.stack([np.ones_like(x), x], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
