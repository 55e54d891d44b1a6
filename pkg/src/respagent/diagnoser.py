"""Toy long-context diagnoser over woven text+audio sequences.

A small pre-norm transformer whose attention is :func:`~respagent.attention.sparse_attention`
under the strategic-global pattern. The prediction head is one affine map
from the final [CLS] hidden state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import DEFAULT_STRIDE, DEFAULT_WINDOW, AttentionPattern, sparse_attention
from .errors import InvalidArgument, TrainingFailure
from .weaving import (
    DEFAULT_P_AUDIO,
    DEFAULT_P_TEXT,
    WeaveLayout,
    WovenSequence,
    layout_pattern,
    modality_dropout,
    weave,
)

log = logging.getLogger(__name__)

LOSS_KINDS = ("ce", "weighted_ce", "focal")


@dataclass
class DiagnoserConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    window: int = DEFAULT_WINDOW
    anchor_stride: int = DEFAULT_STRIDE
    classes: int = 16
    loss_kind: str = "ce"
    focal_gamma: float = 2.0
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 3e-3
    weight_decay: float = 0.0
    seed: int = 0
    p_text: float = DEFAULT_P_TEXT
    p_audio: float = DEFAULT_P_AUDIO
    tail_k: int = 8
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.hidden % self.heads:
            raise InvalidArgument(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.classes < 2:
            raise InvalidArgument("need at least 2 classes")
        if self.focal_gamma < 0:
            raise InvalidArgument("focal_gamma must be >= 0")
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidArgument(f"unknown loss_kind {self.loss_kind!r}")


@dataclass
class ClassificationMetrics:
    accuracy: float
    macro_f1: float
    macro_f1_tail: float
    per_class_f1: np.ndarray
    confusion: np.ndarray
    per_domain_loss: dict[str, float] = field(default_factory=dict)
    confidence: np.ndarray | None = None

    @property
    def per_class_recall(self) -> np.ndarray:
        support = self.confusion.sum(axis=1)
        diag = np.diag(self.confusion).astype(float)
        return np.divide(diag, support, out=np.zeros_like(diag), where=support > 0)

    def summary(self) -> dict:
        return {
            "accuracy": float(self.accuracy),
            "macro_f1": float(self.macro_f1),
            "macro_f1_tail": float(self.macro_f1_tail),
        }

    def to_dict(self) -> dict:
        d = self.summary()
        d["per_class_f1"] = [float(x) for x in self.per_class_f1]
        d["confusion"] = np.asarray(self.confusion).tolist()
        d["per_domain_loss"] = {k: float(v) for k, v in sorted(self.per_domain_loss.items())}
        if self.confidence is not None:
            d["confidence"] = [float(x) for x in self.confidence]
        return d


# ---------------------------------------------------------------- metrics

def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (labels, preds), 1)
    return m


def per_class_f1(confusion: np.ndarray) -> np.ndarray:
    """F1 per class from a (true x pred) matrix; 0/0 counts as 0."""
    c = np.asarray(confusion, dtype=float)
    tp = np.diag(c)
    denom = 2 * tp + (c.sum(axis=0) - tp) + (c.sum(axis=1) - tp)
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def tail_classes(train_support: Sequence[int], k: int) -> list[int]:
    """The ``k`` classes with the smallest training support.

    Ties go to the higher class index, since classes are numbered in
    descending order of original frequency.
    """
    s = np.asarray(train_support)
    order = sorted(range(len(s)), key=lambda c: (s[c], -c))
    return order[:k]


def macro_f1(preds, labels, tail_k: int = 8, class_order_by_support: Sequence[int] | None = None,
             num_classes: int | None = None) -> tuple[float, float]:
    """(macro-F1 over all classes, macro-F1 over the ``tail_k`` rarest).

    ``class_order_by_support`` lists classes rarest first (by training
    support); by default the evaluation labels' own counts are used.
    """
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if len(preds) == 0 or len(preds) != len(labels):
        raise InvalidArgument("preds and labels must be non-empty and of equal length")
    if num_classes is None:
        num_classes = int(max(preds.max(), labels.max())) + 1
        if class_order_by_support is not None:
            num_classes = max(num_classes, len(class_order_by_support))
    if tail_k > num_classes:
        raise InvalidArgument(f"tail_k {tail_k} > number of classes {num_classes}")
    f1 = per_class_f1(confusion_matrix(preds, labels, num_classes))
    if class_order_by_support is None:
        class_order_by_support = tail_classes(np.bincount(labels, minlength=num_classes), num_classes)
    tail = list(class_order_by_support)[:tail_k]
    return float(f1.mean()), float(f1[tail].mean())


def icbhi_score(sp: float, se: float) -> float:
    """Mean of specificity and sensitivity."""
    for name, v in (("Sp", sp), ("Se", se)):
        if not 0.0 <= v <= 1.0:
            raise InvalidArgument(f"{name}={v} outside [0, 1]")
    return (sp + se) / 2


def metrics_from_predictions(preds, labels, num_classes: int, tail: Sequence[int],
                             per_domain_loss: dict[str, float] | None = None,
                             confidence: np.ndarray | None = None) -> ClassificationMetrics:
    conf = confusion_matrix(preds, labels, num_classes)
    f1 = per_class_f1(conf)
    acc = float(np.trace(conf) / conf.sum()) if conf.sum() else 0.0
    return ClassificationMetrics(
        accuracy=acc,
        macro_f1=float(f1.mean()),
        macro_f1_tail=float(f1[list(tail)].mean()),
        per_class_f1=f1,
        confusion=conf,
        per_domain_loss=dict(per_domain_loss or {}),
        confidence=confidence,
    )


# ------------------------------------------------------------------ losses

def inverse_frequency_weights(support: Sequence[int]) -> torch.Tensor:
    """1/support per class, normalized to mean 1 (zero support counts as 1)."""
    s = torch.as_tensor(np.maximum(np.asarray(support, dtype=float), 1.0), dtype=torch.float64)
    w = 1.0 / s
    return w / w.mean()


def per_sample_loss(logits: torch.Tensor, labels: torch.Tensor, kind: str = "ce", gamma: float = 2.0,
                    class_weights: torch.Tensor | None = None) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    C = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= C):
        raise InvalidArgument(f"labels must lie in [0, {C})")
    logp = torch.log_softmax(logits, dim=-1)
    logp_true = logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    ce = -logp_true
    if kind == "ce":
        return ce
    if kind == "weighted_ce":
        if class_weights is None:
            raise InvalidArgument("weighted_ce needs class_weights")
        return torch.as_tensor(class_weights, dtype=logits.dtype)[labels] * ce
    if kind == "focal":
        p_true = logp_true.exp()
        return (1.0 - p_true) ** gamma * ce
    raise InvalidArgument(f"unknown loss kind {kind!r}")


def classification_loss(logits: torch.Tensor, labels, kind: str = "ce", gamma: float = 2.0,
                        class_weights: torch.Tensor | None = None) -> torch.Tensor:
    return per_sample_loss(logits, labels, kind, gamma, class_weights).mean()


# ------------------------------------------------------------------- model

class Block(nn.Module):
    def __init__(self, hidden: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(hidden)
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)
        self.ln2 = nn.LayerNorm(hidden)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, mlp_ratio * hidden), nn.GELU(), nn.Linear(mlp_ratio * hidden, hidden)
        )

    def attend(self, x: torch.Tensor, pattern: AttentionPattern, attention: str) -> torch.Tensor:
        *lead, n, H = x.shape
        q, k, v = self.qkv(x).split(H, dim=-1)
        shape = (*lead, n, self.heads, H // self.heads)
        q, k, v = (t.reshape(shape).transpose(-2, -3) for t in (q, k, v))
        if attention == "sparse":
            out = sparse_attention(q, k, v, pattern)
        else:
            # plain full attention, the dense twin
            out = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1) @ v
        return self.proj(out.transpose(-2, -3).reshape(*lead, n, H))

    def forward(self, x, pattern, attention="sparse"):
        x = x + self.attend(self.ln1(x), pattern, attention)
        return x + self.mlp(self.ln2(x))


class Diagnoser(nn.Module):
    """Woven-sequence classifier.

    ``feat_mean``/``feat_std`` standardize raw audio features before the
    projection ``W``; they are fixed from the training split.
    """

    def __init__(self, cfg: DiagnoserConfig, vocab_size: int, layout: WeaveLayout, seq_len: int,
                 feature_dim: int, cls_global: bool = True, attention: str = "sparse"):
        super().__init__()
        self.cfg = cfg
        self.layout = layout
        self.seq_len = seq_len
        self.attention = attention
        H = cfg.hidden
        self.tok = nn.Embedding(vocab_size, H)
        nn.init.normal_(self.tok.weight, std=0.5)
        self.pos = nn.Parameter(torch.zeros(seq_len, H))
        nn.init.normal_(self.pos, std=0.1)
        self.W = nn.Parameter(torch.randn(feature_dim, H) / math.sqrt(feature_dim))
        self.blocks = nn.ModuleList(Block(H, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(H)
        self.head = nn.Linear(H, cfg.classes)
        self.register_buffer("feat_mean", torch.zeros(feature_dim))
        self.register_buffer("feat_std", torch.ones(feature_dim))
        self.pattern = layout_pattern(layout, seq_len, window=cfg.window, stride=cfg.anchor_stride,
                                      cls_global=cls_global)

    def weave(self, token_ids, features) -> WovenSequence:
        f = torch.as_tensor(features).to(self.W.dtype)
        f = (f - self.feat_mean) / self.feat_std
        seq = weave(token_ids, self.tok, f, self.W, self.layout,
                    anchor_stride=self.cfg.anchor_stride, window=self.cfg.window)
        if self.pattern != seq.attention_pattern:
            seq = replace(seq, attention_pattern=self.pattern,
                          global_flags=torch.as_tensor(self.pattern.global_flags))
        return seq

    def forward_woven(self, seq: WovenSequence) -> torch.Tensor:
        if seq.seq_len != self.seq_len or seq.embeddings.shape[-1] != self.cfg.hidden:
            raise InvalidArgument(
                f"sequence (n={seq.seq_len}, H={seq.embeddings.shape[-1]}) does not match model "
                f"(n={self.seq_len}, H={self.cfg.hidden})"
            )
        x = seq.embeddings + self.pos
        for blk in self.blocks:
            x = blk(x, seq.attention_pattern, self.attention)
        return self.head(self.ln_f(x)[..., self.layout.cls_pos, :])

    def forward(self, token_ids, features, dropout_seed: int | None = None) -> torch.Tensor:
        seq = self.weave(token_ids, features)
        if dropout_seed is not None:
            seq = modality_dropout(seq, self.cfg.p_text, self.cfg.p_audio, seed=dropout_seed)
        return self.forward_woven(seq)


def classify(seq: WovenSequence, model: Diagnoser) -> torch.Tensor:
    """Eval-mode logits for a woven sequence (or batch sharing its layout)."""
    if seq.attention_pattern.seq_len != model.seq_len:
        raise InvalidArgument("sequence pattern does not match the model")
    with torch.no_grad():
        return model.forward_woven(seq)


def predict(logits: torch.Tensor) -> torch.Tensor:
    """Argmax with lowest-index tie-break."""
    return torch.argmax(logits, dim=-1)


# ---------------------------------------------------------------- training

@dataclass
class EncodedSplit:
    """Model-ready clips sharing one woven layout."""

    token_ids: torch.Tensor  # (N, n) long
    features: torch.Tensor  # (N, T~, D) float
    labels: torch.Tensor  # (N,) long
    domains: list[str]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def concat(self, other: "EncodedSplit") -> "EncodedSplit":
        return EncodedSplit(
            torch.cat([self.token_ids, other.token_ids]),
            torch.cat([self.features, other.features]),
            torch.cat([self.labels, other.labels]),
            self.domains + other.domains,
        )


@dataclass
class DiagnoserData:
    splits: dict[str, EncodedSplit]
    vocab_size: int
    layout: WeaveLayout
    seq_len: int
    feature_dim: int


@dataclass
class TrainResult:
    model: Diagnoser
    trajectory: list[dict]
    metrics: dict[str, list[ClassificationMetrics]]
    best_epoch: int
    tail: list[int]
    train_support: np.ndarray


def temperature_calibrate(logits: torch.Tensor, labels: torch.Tensor) -> float:
    """Single temperature minimizing NLL over a fixed grid."""
    grid = np.exp(np.linspace(np.log(0.25), np.log(8.0), 41))
    best, best_t = float("inf"), 1.0
    for t in grid:
        nll = F.cross_entropy(logits / t, labels).item()
        if nll < best:
            best, best_t = nll, float(t)
    return best_t


def evaluate(model: Diagnoser, split: EncodedSplit, tail: Sequence[int], batch_size: int = 128,
             temperature: float = 1.0) -> tuple[ClassificationMetrics, torch.Tensor]:
    model.eval()
    chunks = []
    with torch.no_grad():
        for i in range(0, len(split), batch_size):
            chunks.append(model(split.token_ids[i:i + batch_size], split.features[i:i + batch_size]))
    logits = torch.cat(chunks) if chunks else torch.zeros(0, model.cfg.classes)
    labels = split.labels
    losses = F.cross_entropy(logits, labels, reduction="none").numpy() if len(split) else np.zeros(0)
    per_domain: dict[str, list[float]] = {}
    for d, l in zip(split.domains, losses):
        per_domain.setdefault(d, []).append(float(l))
    C = model.cfg.classes
    probs = torch.softmax(logits / temperature, dim=-1).numpy()
    conf = np.zeros(C)
    lab = labels.numpy()
    for c in range(C):
        rows = probs[lab == c]
        conf[c] = rows.max(axis=1).mean() if len(rows) else 0.0
    m = metrics_from_predictions(
        predict(logits).numpy(), lab, C, tail,
        per_domain_loss={d: float(np.mean(v)) for d, v in sorted(per_domain.items())},
        confidence=conf,
    )
    return m, logits


def build_model(data: DiagnoserData, cfg: DiagnoserConfig, **kw) -> Diagnoser:
    torch.manual_seed(cfg.seed)
    model = Diagnoser(cfg, data.vocab_size, data.layout, data.seq_len, data.feature_dim, **kw)
    f = data.splits["train"].features.double()
    flat = f.reshape(-1, f.shape[-1])
    model.feat_mean.copy_(flat.mean(0).float())
    model.feat_std.copy_(flat.std(0).clamp_min(1e-3).float())
    return model


def train(data: DiagnoserData, cfg: DiagnoserConfig, eval_splits: Sequence[str] | None = None,
          tail: Sequence[int] | None = None) -> TrainResult:
    """Mini-batch Adam training; returns the best-validation (macro-F1) checkpoint.

    Metrics for every split in ``eval_splits`` (default: all) are recorded at
    epoch 0 (initialization) and after every epoch. ``tail`` overrides the
    tail classes derived from the training support.
    """
    if "train" not in data.splits or len(data.splits["train"]) == 0:
        raise InvalidArgument("training split is empty")
    train_split = data.splits["train"]
    valid_name = "valid" if "valid" in data.splits else "train"
    eval_splits = list(eval_splits or data.splits)
    C = cfg.classes
    train_support = np.bincount(train_split.labels.numpy(), minlength=C)
    tail = list(tail) if tail is not None else tail_classes(train_support, cfg.tail_k)
    class_weights = inverse_frequency_weights(train_support).float()

    model = build_model(data, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)

    trajectory: list[dict] = []
    metrics: dict[str, list[ClassificationMetrics]] = {s: [] for s in eval_splits}

    def record(epoch: int):
        for name in eval_splits:
            m, _ = evaluate(model, data.splits[name], tail)
            metrics[name].append(m)
            trajectory.append({"epoch": epoch, "split": name, **m.summary()})

    record(0)
    best_epoch, best_score = 0, metrics[valid_name][0].macro_f1 if valid_name in metrics else -1.0
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = torch.randperm(len(train_split), generator=gen)
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            logits = model(train_split.token_ids[idx], train_split.features[idx],
                           dropout_seed=cfg.seed * 1_000_003 + step)
            loss = classification_loss(logits, train_split.labels[idx], cfg.loss_kind, cfg.focal_gamma,
                                       class_weights)
            if not torch.isfinite(loss):
                raise TrainingFailure("loss is not finite", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        record(epoch)
        if valid_name in metrics:
            score = metrics[valid_name][-1].macro_f1
            if score > best_score:
                best_epoch, best_score = epoch, score
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
        log.debug("epoch %d loss %.4f", epoch, loss.item())
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, trajectory, metrics, best_epoch, tail, train_support)


def config_dict(cfg: DiagnoserConfig) -> dict:
    return asdict(cfg)
