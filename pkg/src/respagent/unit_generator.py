"""Style-conditioned autoregressive model over discrete acoustic units.

Prompt layout::

    [DIAGNOSIS] d_1 .. d_m [AUDIO_0] .. [AUDIO_{K-1}] y_1 .. y_L [END]

The K ``[AUDIO_k]`` placeholder embeddings are replaced by style vectors
projected from mean-pooled reference features. During training, for each
masked target position ``t`` the input embedding at ``t-1`` is swapped for a
dedicated mask vector, so the oracle previous unit is never visible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .attention import AttentionPattern, sparse_attention
from .errors import InvalidArgument

DEFAULT_V = 64
DEFAULT_K = 8
MAX_STYLE_TOKENS = 16


@dataclass(frozen=True)
class UnitVocab:
    """Id layout of the unit model's embedding table.

    Units occupy ``[0, V)``; END, BEATS_MASK and PAD sit just above, then the
    prompt markers, the K_max style placeholders and the diagnosis words.
    """

    V: int = DEFAULT_V
    n_labels: int = 16
    max_style: int = MAX_STYLE_TOKENS

    @property
    def END(self) -> int:
        return self.V

    @property
    def MASK(self) -> int:
        return self.V + 1

    @property
    def PAD(self) -> int:
        return self.V + 2

    @property
    def DIAGNOSIS(self) -> int:
        return self.V + 3

    def audio_slot(self, k: int) -> int:
        if not 0 <= k < self.max_style:
            raise InvalidArgument(f"style slot {k} outside [0, {self.max_style})")
        return self.V + 4 + k

    def label_token(self, label: int) -> int:
        return self.V + 4 + self.max_style + int(label)

    @property
    def size(self) -> int:
        return self.V + 4 + self.max_style + self.n_labels

    @property
    def n_outputs(self) -> int:
        """Output classes: the V units plus END."""
        return self.V + 1

    def is_audio_slot(self, tok: int) -> bool:
        return self.V + 4 <= tok < self.V + 4 + self.max_style


@dataclass(frozen=True)
class StylePrefix:
    K: int
    pooled: torch.Tensor  # (K, D)
    projected: torch.Tensor  # (K, H)


@dataclass(frozen=True)
class UnitSequence:
    """Generated or target units; ``terminated`` means END was observed."""

    units: tuple[int, ...]
    V: int
    terminated: bool = True

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(int(u) for u in self.units))
        if any(u < 0 or u >= self.V for u in self.units):
            raise InvalidArgument(f"unit ids must lie in [0, {self.V})")

    def targets(self, length: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """(ids, pad_mask) with END appended when terminated, padded to ``length``.

        Padding ids are the END id (never scored: pad_mask is True there).
        """
        ids = list(self.units) + ([self.V] if self.terminated else [])
        L = len(ids) if length is None else length
        if L < len(ids):
            raise InvalidArgument(f"length {L} shorter than sequence {len(ids)}")
        pad = [True] * (L - len(ids))
        return (torch.tensor(ids + [self.V] * len(pad), dtype=torch.long),
                torch.tensor([False] * len(ids) + pad, dtype=torch.bool))

    def to_dict(self) -> dict:
        return {"units": list(self.units), "V": self.V, "terminated": self.terminated}


@dataclass(frozen=True)
class MaskPlan:
    target_span: tuple[int, int]  # half-open [start, stop)
    masked: tuple[int, ...]
    ratio: float

    def __post_init__(self):
        lo, hi = self.target_span
        if any(not lo <= t < hi for t in self.masked):
            raise InvalidArgument("masked positions must lie inside the target span")


# ------------------------------------------------------------ style prefix

def pool_style(Z: torch.Tensor, K: int) -> torch.Tensor:
    """Mean of K contiguous, maximally even time segments of ``Z`` (T x D)."""
    Z = torch.as_tensor(Z)
    T = Z.shape[0]
    if T < 1 or K < 1:
        raise InvalidArgument(f"need T >= 1 and K >= 1 (T={T}, K={K})")
    if K > T:
        raise InvalidArgument(f"K={K} exceeds T={T}")
    bounds = [(k * T) // K for k in range(K + 1)]
    return torch.stack([Z[bounds[k]:bounds[k + 1]].mean(dim=0) for k in range(K)])


class StyleProjector(nn.Module):
    """Rowwise two-layer perceptron D -> H -> H."""

    def __init__(self, in_dim: int, hidden: int, activation: str = "relu"):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.act = {"relu": nn.ReLU(), "gelu": nn.GELU(), "tanh": nn.Tanh()}[activation]

    def forward(self, P: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(P)))


def style_project(P: torch.Tensor, proj: StyleProjector) -> torch.Tensor:
    if P.shape[-1] != proj.fc1.in_features:
        raise InvalidArgument(f"pooled dim {P.shape[-1]} != projector input {proj.fc1.in_features}")
    return proj(P.to(proj.fc1.weight.dtype))


def style_prefix(Z: torch.Tensor, K: int, proj: StyleProjector) -> StylePrefix:
    if K == 0:
        H = proj.fc2.out_features
        return StylePrefix(0, torch.zeros(0, Z.shape[-1]), torch.zeros(0, H, dtype=proj.fc2.weight.dtype))
    P = pool_style(Z, K)
    return StylePrefix(K, P, style_project(P, proj))


# ------------------------------------------------------------------ prompt

def prompt_token_ids(diagnosis_tokens: Sequence[int], K: int, vocab: UnitVocab) -> list[int]:
    return [vocab.DIAGNOSIS, *diagnosis_tokens, *(vocab.audio_slot(k) for k in range(K))]


def build_prompt(prompt_ids: Sequence[int], E_style: torch.Tensor, embed: nn.Embedding,
                 vocab: UnitVocab) -> torch.Tensor:
    """Embed ``prompt_ids`` and overwrite the [AUDIO_k] rows with ``E_style`` in order."""
    ids = torch.as_tensor(list(prompt_ids), dtype=torch.long)
    slots = [i for i, t in enumerate(ids.tolist()) if vocab.is_audio_slot(t)]
    if len(slots) != E_style.shape[0]:
        raise InvalidArgument(f"{len(slots)} style placeholders but {E_style.shape[0]} style rows")
    rows = embed(ids)
    if not slots:
        return rows
    parts, prev = [], 0
    for k, pos in enumerate(slots):
        parts.append(rows[prev:pos])
        parts.append(E_style[k:k + 1].to(rows.dtype))
        prev = pos + 1
    parts.append(rows[prev:])
    return torch.cat(parts, dim=0)


# ----------------------------------------------------------------- masking

def sample_mask(target_span: tuple[int, int], ratio: float, seed: int) -> MaskPlan:
    """Uniformly sample ``round(ratio * |span|)`` positions (round half to even)."""
    if not 0.0 <= ratio <= 1.0:
        raise InvalidArgument(f"ratio {ratio} outside [0, 1]")
    lo, hi = target_span
    size = max(0, hi - lo)
    m = int(round(ratio * size))  # Python round is half-to-even
    rng = np.random.default_rng(seed)
    picked = rng.choice(size, size=m, replace=False) if m else np.zeros(0, dtype=int)
    return MaskPlan((lo, hi), tuple(sorted(int(lo + p) for p in picked)), ratio)


def apply_leakfree_mask(embeds: torch.Tensor, plan: MaskPlan, mask_vec: torch.Tensor) -> torch.Tensor:
    """Replace input row ``t-1`` by ``mask_vec`` for every masked target ``t``."""
    if not plan.masked:
        return embeds
    if min(plan.masked) < 1:
        raise InvalidArgument("masked target at position 0 has no preceding input")
    if max(plan.masked) > embeds.shape[-2]:
        raise InvalidArgument("masked target beyond the input sequence")
    rows = torch.tensor([t - 1 for t in plan.masked])
    sel = torch.zeros(embeds.shape[-2], dtype=torch.bool)
    sel[rows] = True
    return torch.where(sel.unsqueeze(-1), mask_vec.to(embeds.dtype).expand_as(embeds), embeds)


# -------------------------------------------------------------------- loss

def unit_nll(logits: torch.Tensor, targets: UnitSequence | tuple[torch.Tensor, torch.Tensor]):
    """(sum, per-token mean) of -log p(y_i) over non-pad positions, END included."""
    if isinstance(targets, UnitSequence):
        ids, pad = targets.targets(logits.shape[-2])
    else:
        ids, pad = targets
    if ids.shape != logits.shape[:-1]:
        raise InvalidArgument(f"logits {tuple(logits.shape)} do not match targets {tuple(ids.shape)}")
    if int(ids.max()) >= logits.shape[-1] or int(ids.min()) < 0:
        raise InvalidArgument(f"target id outside [0, {logits.shape[-1]})")
    logp = torch.log_softmax(logits, dim=-1).gather(-1, ids.unsqueeze(-1)).squeeze(-1)
    keep = ~pad
    total = -(logp * keep).sum()
    count = keep.sum()
    return total, total / count.clamp_min(1)


# ------------------------------------------------------------------- model

class CausalBlock(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(hidden)
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.ln2 = nn.LayerNorm(hidden)
        self.mlp = nn.Sequential(nn.Linear(hidden, 2 * hidden), nn.GELU(), nn.Linear(2 * hidden, hidden))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, H = x.shape
        pattern = AttentionPattern(seq_len=n, window=n, causal=True)
        q, k, v = self.qkv(self.ln1(x)).split(H, dim=-1)
        shape = (*lead, n, self.heads, H // self.heads)
        q, k, v = (t.reshape(shape).transpose(-2, -3) for t in (q, k, v))
        a = sparse_attention(q, k, v, pattern).transpose(-2, -3).reshape(*lead, n, H)
        x = x + self.proj(a)
        return x + self.mlp(self.ln2(x))


@dataclass
class UnitLMConfig:
    V: int = DEFAULT_V
    K: int = DEFAULT_K
    feature_dim: int = 16
    hidden: int = 64
    heads: int = 4
    layers: int = 2
    n_labels: int = 16
    max_len: int = 256
    mask_ratio: float = 0.1
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 3e-3
    seed: int = 0


class UnitLM(nn.Module):
    def __init__(self, cfg: UnitLMConfig):
        super().__init__()
        self.cfg = cfg
        self.vocab = UnitVocab(cfg.V, cfg.n_labels)
        H = cfg.hidden
        self.embed = nn.Embedding(self.vocab.size, H)
        self.pos = nn.Parameter(0.02 * torch.randn(cfg.max_len, H))
        self.style = StyleProjector(cfg.feature_dim, H)
        self.blocks = nn.ModuleList(CausalBlock(H, cfg.heads) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(H)
        self.head = nn.Linear(H, self.vocab.n_outputs)

    @property
    def mask_vec(self) -> torch.Tensor:
        return self.embed.weight[self.vocab.MASK]

    def prompt(self, label: int, style_frames: torch.Tensor | None, K: int | None = None) -> torch.Tensor:
        K = self.cfg.K if K is None else K
        ids = prompt_token_ids([self.vocab.label_token(label)], K, self.vocab)
        if K == 0:
            E = torch.zeros(0, self.cfg.hidden, dtype=self.embed.weight.dtype)
        else:
            E = style_prefix(torch.as_tensor(style_frames, dtype=self.embed.weight.dtype), K, self.style).projected
        return build_prompt(ids, E, self.embed, self.vocab)

    def logits_from_embeds(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[-2]
        if n > self.cfg.max_len:
            raise InvalidArgument(f"sequence length {n} > max_len {self.cfg.max_len}")
        x = x + self.pos[:n]
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.ln_f(x))

    def input_embeds(self, prompt: torch.Tensor, units: UnitSequence) -> torch.Tensor:
        """Prompt rows followed by embeddings of every target except the last."""
        ids, _ = units.targets()
        return torch.cat([prompt, self.embed(ids[:-1])], dim=0)

    def target_span(self, prompt_len: int, units: UnitSequence) -> tuple[int, int]:
        """Stream positions of targets whose preceding input is itself a unit."""
        L = len(units.units) + int(units.terminated)
        return (prompt_len + 1, prompt_len + L)

    def sequence_logits(self, prompt: torch.Tensor, units: UnitSequence, plan: MaskPlan | None = None):
        """Logits predicting each target y_1..y_L (row j predicts stream position P+j)."""
        x = self.input_embeds(prompt, units)
        if plan is not None:
            x = apply_leakfree_mask(x, plan, self.mask_vec)
        P = prompt.shape[0]
        return self.logits_from_embeds(x)[P - 1:]


def generate(model: UnitLM, prompt: torch.Tensor, max_len: int, seed: int = 0,
             temperature: float = 0.0) -> UnitSequence:
    """Sample until END or ``max_len`` units; greedy when ``temperature == 0``."""
    if max_len < 1:
        raise InvalidArgument("max_len must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    V = model.vocab.V
    units: list[int] = []
    x = prompt
    with torch.no_grad():
        for _ in range(max_len):
            logits = model.logits_from_embeds(x)[-1]
            if temperature == 0:
                nxt = int(torch.argmax(logits))
            else:
                probs = torch.softmax(logits / temperature, dim=-1)
                nxt = int(torch.multinomial(probs, 1, generator=gen))
            if nxt == model.vocab.END:
                return UnitSequence(units, V, terminated=True)
            units.append(nxt)
            x = torch.cat([x, model.embed.weight[nxt:nxt + 1]], dim=0)
    return UnitSequence(units, V, terminated=False)


@dataclass
class UnitExample:
    label: int
    style_frames: torch.Tensor  # (T, D)
    units: UnitSequence


@dataclass
class UnitTrainResult:
    model: UnitLM
    losses: list[float] = field(default_factory=list)


def train_unit_lm(examples: Sequence[UnitExample], cfg: UnitLMConfig) -> UnitTrainResult:
    """Teacher-forced training with leak-free masking; sum-NLL averaged per token."""
    torch.manual_seed(cfg.seed)
    model = UnitLM(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(examples))
        epoch_loss, epoch_tokens = 0.0, 0
        for b in range(0, len(order), cfg.batch_size):
            total, count = 0.0, 0
            for i in order[b:b + cfg.batch_size]:
                ex = examples[int(i)]
                prompt = model.prompt(ex.label, ex.style_frames)
                span = model.target_span(prompt.shape[0], ex.units)
                plan = sample_mask(span, cfg.mask_ratio, seed=cfg.seed * 7919 + step * 131 + int(i))
                logits = model.sequence_logits(prompt, ex.units, plan)
                s, _ = unit_nll(logits, ex.units)
                total = total + s
                count += len(ex.units.units) + int(ex.units.terminated)
            loss = total / max(count, 1)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            epoch_loss += float(total.detach())
            epoch_tokens += count
        losses.append(epoch_loss / max(epoch_tokens, 1))
    model.eval()
    return UnitTrainResult(model, losses)


def quantize_units(band: np.ndarray, V: int = DEFAULT_V, lo: float | None = None,
                   hi: float | None = None) -> np.ndarray:
    """Scalar-quantize a 1-D feature track into ``V`` uniform bins over [lo, hi]."""
    x = np.asarray(band, dtype=np.float64)
    lo = float(x.min()) if lo is None else lo
    hi = float(x.max()) if hi is None else hi
    if hi <= lo:
        return np.zeros(len(x), dtype=np.int64)
    q = np.floor((x - lo) / (hi - lo) * V).astype(np.int64)
    return np.clip(q, 0, V - 1)
