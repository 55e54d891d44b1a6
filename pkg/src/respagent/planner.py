"""Synthesis budget allocation over (label x domain) cells and the closed loop.

Static policies turn one error profile into an integer plan. The adaptive
allocator (``a2ca``) rescores cells from the latest profile every round.
Executors turn plans into fresh metrics: either a real retrain (supplied by
:mod:`respagent.benchkit`) or the fast saturating :class:`ResponseModel`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .diagnoser import ClassificationMetrics, tail_classes
from .errors import ExecutorFailure, InvalidArgument

log = logging.getLogger(__name__)

POLICIES = (
    "no_synth",
    "random",
    "class_prior",
    "uncertainty_static",
    "rare_only",
    "hard_case_only",
    "hard_domain_only",
    "rare_x_hard_domain",
    "a2ca",
)
STATIC_POLICIES = POLICIES[:-1]
DESK_BUDGETS = (0, 100, 200, 300, 500)


@dataclass
class ErrorProfile:
    per_class_error: np.ndarray
    per_class_support: np.ndarray
    per_domain_loss: dict[str, float]
    confidence: np.ndarray
    round_index: int = 0
    flagged: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.per_class_error = np.asarray(self.per_class_error, dtype=float)
        self.per_class_support = np.asarray(self.per_class_support, dtype=np.int64)
        self.confidence = np.asarray(self.confidence, dtype=float)
        C = len(self.per_class_error)
        if len(self.per_class_support) != C or len(self.confidence) != C:
            raise InvalidArgument("profile vectors disagree on the class count")
        if ((self.per_class_error < 0) | (self.per_class_error > 1)).any():
            raise InvalidArgument("per-class error outside [0, 1]")
        if ((self.confidence < 0) | (self.confidence > 1)).any():
            raise InvalidArgument("confidence outside [0, 1]")
        if (self.per_class_support < 0).any():
            raise InvalidArgument("negative support")

    @property
    def num_classes(self) -> int:
        return len(self.per_class_error)

    def domain_vector(self, domains: Sequence[str]) -> np.ndarray:
        return np.array([float(self.per_domain_loss.get(d, 0.0)) for d in domains])

    def to_dict(self) -> dict:
        return {
            "per_class_error": self.per_class_error.tolist(),
            "per_class_support": self.per_class_support.tolist(),
            "per_domain_loss": {k: float(v) for k, v in sorted(self.per_domain_loss.items())},
            "confidence": self.confidence.tolist(),
            "round_index": self.round_index,
            "flagged": list(self.flagged),
        }


@dataclass
class AllocationPlan:
    counts: np.ndarray  # (C, D) int64
    budget: int
    policy: str
    domains: tuple[str, ...]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[1] != len(self.domains):
            raise InvalidArgument("plan shape does not match the domain list")
        if (self.counts < 0).any():
            raise InvalidArgument("negative plan count")
        if int(self.counts.sum()) != self.budget:
            raise InvalidArgument(f"plan sums to {int(self.counts.sum())}, budget is {self.budget}")

    @property
    def per_class(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_dict(self) -> dict:
        return {"policy": self.policy, "budget": self.budget, "domains": list(self.domains),
                "counts": self.counts.tolist()}


def zero_plan(C: int, domains: Sequence[str], policy: str = "no_synth") -> AllocationPlan:
    return AllocationPlan(np.zeros((C, len(domains)), dtype=np.int64), 0, policy, tuple(domains))


# ------------------------------------------------------------ apportionment

def largest_remainder(weights, total: int) -> np.ndarray:
    """Integer counts proportional to ``weights`` summing to ``total``.

    Floors the quotas, then hands the shortfall to the largest fractional
    parts (lowest index first on ties). All-zero weights fall back to uniform.
    """
    w = np.asarray(weights, dtype=float)
    shape = w.shape
    w = w.ravel()
    if total < 0:
        raise InvalidArgument("budget must be >= 0")
    if (w < 0).any() or not np.isfinite(w).all():
        raise InvalidArgument("weights must be finite and non-negative")
    if w.size == 0:
        raise InvalidArgument("no cells to allocate over")
    if w.sum() <= 0:
        if total > 0:
            log.warning("all-zero allocation weights; using uniform")
        w = np.ones_like(w)
    quota = w / w.sum() * total
    base = np.floor(quota).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        frac = quota - base
        order = sorted(range(w.size), key=lambda i: (-frac[i], i))
        for i in order[:short]:
            base[i] += 1
    elif short < 0:  # float noise pushed a floor too high
        frac = quota - base
        order = sorted((i for i in range(w.size) if base[i] > 0), key=lambda i: (frac[i], -i))
        for i in order[:-short]:
            base[i] -= 1
    return base.reshape(shape)


def water_fill(supports, total: int) -> np.ndarray:
    """Raise the smallest supports toward a common level with ``total`` units."""
    s = np.asarray(supports, dtype=np.int64)
    if total < 0:
        raise InvalidArgument("budget must be >= 0")
    add = np.zeros_like(s)
    if total == 0:
        return add
    # highest integer level L with sum(max(0, L - s)) <= total
    lo, hi = int(s.min()), int(s.min()) + total
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if int(np.maximum(0, mid - s).sum()) <= total:
            lo = mid
        else:
            hi = mid - 1
    add = np.maximum(0, lo - s)
    rest = total - int(add.sum())
    at_level = [i for i in range(len(s)) if s[i] + add[i] == lo]
    for i in at_level[:rest]:
        add[i] += 1
    return add


def split_even(class_counts, D: int) -> np.ndarray:
    return np.stack([largest_remainder(np.ones(D), int(c)) for c in class_counts])


# ----------------------------------------------------------------- profiles

def profile_from_eval(metrics: ClassificationMetrics, supports, confidences=None,
                      round_index: int = 0) -> ErrorProfile:
    """Error profile from evaluation metrics; classes with no eval rows get error 1."""
    conf = np.asarray(metrics.confusion, dtype=float)
    C = conf.shape[0]
    supports = np.asarray(supports)
    if len(supports) != C:
        raise InvalidArgument("supports and confusion disagree on the class count")
    rows = conf.sum(axis=1)
    flagged = [int(k) for k in np.flatnonzero(rows == 0)]
    if flagged:
        log.warning("classes without evaluation support: %s", flagged)
    recall = metrics.per_class_recall
    err = np.where(rows > 0, 1.0 - recall, 1.0)
    if confidences is None:
        confidences = metrics.confidence if metrics.confidence is not None else np.zeros(C)
    return ErrorProfile(np.clip(err, 0.0, 1.0), supports, dict(metrics.per_domain_loss),
                        np.asarray(confidences, dtype=float), round_index, flagged)


def rarity(supports) -> np.ndarray:
    """``1/(support+1)`` scaled so the rarest class scores 1."""
    r = 1.0 / (np.asarray(supports, dtype=float) + 1.0)
    return r / r.max()


def _normalized(v: np.ndarray) -> np.ndarray:
    m = v.max() if v.size else 0.0
    return v / m if m > 0 else np.zeros_like(v)


# ------------------------------------------------------------------ policies

@dataclass(frozen=True)
class A2CAWeights:
    alpha: float = 1.0  # rarity
    beta: float = 1.0  # error
    gamma: float = 1.0  # domain difficulty
    temperature: float = 0.5
    confidence: float = 0.0  # optional (1 - confidence) term


def a2ca_scores(profile: ErrorProfile, domains: Sequence[str], weights: A2CAWeights = A2CAWeights()) -> np.ndarray:
    r = rarity(profile.per_class_support)
    dl = _normalized(profile.domain_vector(domains))
    cls = weights.alpha * r + weights.beta * profile.per_class_error
    if weights.confidence:
        cls = cls + weights.confidence * (1.0 - profile.confidence)
    return cls[:, None] + weights.gamma * dl[None, :]


def a2ca_round(history: Sequence[ErrorProfile], round_budget: int, domains: Sequence[str],
               weights: A2CAWeights = A2CAWeights()) -> AllocationPlan:
    """One adaptive round: tempered softmax over cell scores from the latest profile."""
    if round_budget < 0:
        raise InvalidArgument("round budget must be >= 0")
    if not history:
        raise InvalidArgument("a2ca needs at least one profile")
    prof = history[-1]
    scores = a2ca_scores(prof, domains, weights)
    if not scores.any():
        log.warning("all a2ca scores are zero; allocating uniformly")
    if math.isinf(weights.temperature):
        probs = np.ones_like(scores)
    else:
        if weights.temperature <= 0:
            raise InvalidArgument("temperature must be positive")
        z = scores / weights.temperature
        probs = np.exp(z - z.max())
    counts = largest_remainder(probs, round_budget)
    return AllocationPlan(counts, round_budget, "a2ca", tuple(domains))


def random_cells(n_cells: int, B: int, seed: int) -> np.ndarray:
    """First ``B`` of a seeded i.i.d. uniform cell stream, so plans nest in ``B``."""
    u = np.random.default_rng(seed).random(B)
    return np.bincount(np.minimum((u * n_cells).astype(np.int64), n_cells - 1), minlength=n_cells)


def allocate(policy: str, profile: ErrorProfile, B: int, domains: Sequence[str], seed: int = 0,
             tail_k: int = 8, weights: A2CAWeights = A2CAWeights()) -> AllocationPlan:
    if policy not in POLICIES:
        raise InvalidArgument(f"unknown policy {policy!r}")
    if B < 0:
        raise InvalidArgument("budget must be >= 0")
    C, D = profile.num_classes, len(domains)
    if D < 1:
        raise InvalidArgument("need at least one domain")
    if B == 0 or policy == "no_synth":
        return zero_plan(C, domains, policy)
    sup = profile.per_class_support
    ones_d = np.ones(D)
    if policy == "random":
        counts = random_cells(C * D, B, seed).reshape(C, D)
    elif policy == "class_prior":
        counts = split_even(water_fill(sup, B), D)
    elif policy in ("uncertainty_static", "hard_case_only"):
        counts = largest_remainder(np.outer(profile.per_class_error, ones_d), B)
    elif policy == "rare_only":
        w = np.zeros(C)
        tail = tail_classes(sup, min(tail_k, C))
        w[tail] = 1.0 / (sup[tail] + 1.0)
        counts = largest_remainder(np.outer(w, ones_d), B)
    elif policy == "hard_domain_only":
        counts = largest_remainder(np.outer(np.ones(C), profile.domain_vector(domains)), B)
    elif policy == "rare_x_hard_domain":
        counts = largest_remainder(np.outer(rarity(sup), profile.domain_vector(domains)), B)
    else:
        return a2ca_round([profile], B, domains, weights)
    return AllocationPlan(counts, B, policy, tuple(domains))


def round_budgets(B_total: int, R: int) -> list[int]:
    """Equal per-round budgets; the remainder goes to the last round."""
    if R < 1:
        raise InvalidArgument("rounds must be >= 1")
    if B_total < 0:
        raise InvalidArgument("budget must be >= 0")
    per = B_total // R
    return [per] * (R - 1) + [B_total - per * (R - 1)]


def split_plan(plan: AllocationPlan, budgets: Sequence[int]) -> list[AllocationPlan]:
    """Cut a static plan into consecutive rounds with the given budgets.

    Each cell's units are spread over [0, 1) at ``(j + 0.5)/n``; rounds take
    consecutive chunks of the time-sorted unit stream.
    """
    if sum(budgets) != plan.budget:
        raise InvalidArgument("round budgets do not sum to the plan budget")
    flat = plan.counts.ravel()
    units = sorted(((j + 0.5) / n, cell) for cell, n in enumerate(flat) for j in range(int(n)))
    out, pos = [], 0
    for b in budgets:
        counts = np.zeros_like(flat)
        for _, cell in units[pos:pos + b]:
            counts[cell] += 1
        pos += b
        out.append(AllocationPlan(counts.reshape(plan.counts.shape), b, plan.policy, plan.domains))
    return out


# ------------------------------------------------------------ response model

@dataclass
class ResponseModel:
    """Saturating surrogate: recall gain per cell is ``g(1 - exp(-n/tau))``."""

    gain_max: np.ndarray  # (C, D) in [0, 1]
    tau: np.ndarray  # (C, D) > 0
    base_recall: np.ndarray  # (C,)
    base_precision: np.ndarray  # (C,)
    supports: np.ndarray  # (C,) training counts
    eval_support: np.ndarray  # (C,)
    domains: tuple[str, ...]
    tail_k: int = 8

    def __post_init__(self):
        self.gain_max = np.asarray(self.gain_max, dtype=float)
        self.tau = np.asarray(self.tau, dtype=float)
        if self.gain_max.shape != self.tau.shape or self.gain_max.shape[1] != len(self.domains):
            raise InvalidArgument("response model shapes disagree")
        if ((self.gain_max < 0) | (self.gain_max > 1)).any():
            raise InvalidArgument("gain_max outside [0, 1]")
        if (self.tau <= 0).any():
            raise InvalidArgument("tau must be positive")
        for name in ("base_recall", "base_precision", "supports", "eval_support"):
            setattr(self, name, np.asarray(getattr(self, name)))

    @property
    def num_classes(self) -> int:
        return self.gain_max.shape[0]

    @property
    def tail(self) -> list[int]:
        return tail_classes(self.supports, min(self.tail_k, self.num_classes))


def cell_gain(counts, model: ResponseModel) -> np.ndarray:
    return model.gain_max * (1.0 - np.exp(-np.asarray(counts, dtype=float) / model.tau))


def simulate_response(counts, model: ResponseModel) -> ClassificationMetrics:
    """Metrics after adding ``counts`` synthetic clips per cell.

    Precision is held at its base value; F1 follows from the raised recall.
    The reported confusion spreads each class's misses evenly over the others.
    """
    if isinstance(counts, AllocationPlan):
        counts = counts.counts
    counts = np.asarray(counts)
    if counts.shape != model.gain_max.shape:
        raise InvalidArgument("plan shape does not match the response model")
    g = cell_gain(counts, model)
    recall = np.minimum(1.0, model.base_recall + g.sum(axis=1))
    prec = model.base_precision
    f1 = np.divide(2 * prec * recall, prec + recall, out=np.zeros_like(recall), where=(prec + recall) > 0)
    n = model.eval_support.astype(float)
    C = model.num_classes
    conf = np.zeros((C, C))
    off = (1.0 - recall) * n / max(C - 1, 1)
    for k in range(C):
        conf[k] = off[k] if C > 1 else 0.0
        conf[k, k] = recall[k] * n[k]
    left = model.gain_max - g
    domain_loss = {d: float(left[:, j].mean()) for j, d in enumerate(model.domains)}
    return ClassificationMetrics(
        accuracy=float((recall * n).sum() / n.sum()),
        macro_f1=float(f1.mean()),
        macro_f1_tail=float(f1[model.tail].mean()),
        per_class_f1=f1,
        confusion=conf,
        per_domain_loss=domain_loss,
        confidence=recall.copy(),
    )


def _spread(rng, n, ratio):
    """``n`` factors in [1, ratio] whose max/min is exactly ``ratio``."""
    u = rng.random(n)
    u = (u - u.min()) / (u.max() - u.min())
    return ratio ** u


def draw_response_model(seed: int = 0, C: int = 16, domains: Sequence[str] = ("d0", "d1"),
                        heterogeneity: float = 4.0, tau_scale: float = 8.0, tau_power: float = 0.0,
                        support_weight: float = 0.7, difficulty_weight: float = 0.3,
                        domain_spread: float = 3.0, tail_k: int = 8) -> ResponseModel:
    """A long-tail surrogate.

    Base recall rises with log support plus an independent difficulty draw.
    Headroom is split over domains with a per-domain factor, and ``tau`` grows
    with real support, so a clip counts for more in a data-starved class.
    Cell factors for ``gain_max`` and ``tau`` each span exactly ``heterogeneity``.
    """
    if heterogeneity < 1 or domain_spread < 1:
        raise InvalidArgument("spread factors must be >= 1")
    rng = np.random.default_rng(seed)
    D = len(domains)
    supports = np.maximum(2, np.round(300 * 0.7 ** np.arange(C))).astype(np.int64)
    level = np.log1p(supports) / np.log1p(supports.max())
    base = np.clip(0.1 + support_weight * level + difficulty_weight * rng.random(C), 0.05, 0.95)
    dom = _spread(rng, D, domain_spread) if D > 1 else np.ones(1)
    q = _spread(rng, C * D, heterogeneity).reshape(C, D) * dom[None, :]
    gain = 0.9 * (1 - base)[:, None] * q / q.sum(axis=1, keepdims=True)
    tau = tau_scale * ((supports + 1.0) ** tau_power)[:, None] * _spread(rng, C * D, heterogeneity).reshape(C, D)
    prec = np.clip(0.5 + 0.5 * base, 0.0, 1.0)
    return ResponseModel(gain, tau, base, prec, supports, np.maximum(5, supports // 2), tuple(domains), tail_k)


def reference_response_model() -> ResponseModel:
    return draw_response_model(seed=0)


# --------------------------------------------------------------------- loop

@dataclass
class Evaluation:
    """Metrics to report plus, optionally, separate metrics to plan from."""

    report: ClassificationMetrics
    profile: ClassificationMetrics | None = None

    @property
    def for_profile(self) -> ClassificationMetrics:
        return self.profile if self.profile is not None else self.report


def _as_evaluation(result) -> Evaluation:
    return result if isinstance(result, Evaluation) else Evaluation(result)


class Executor(Protocol):
    domains: tuple[str, ...]

    def baseline(self) -> tuple[Evaluation | ClassificationMetrics, np.ndarray]:
        """Metrics before any synthesis and the real per-class training support."""

    def execute(self, round_index: int, cumulative: np.ndarray) -> Evaluation | ClassificationMetrics:
        """Metrics after training with ``cumulative`` synthetic counts per cell."""


class ResponseExecutor:
    def __init__(self, model: ResponseModel):
        self.model = model
        self.domains = model.domains

    def baseline(self):
        return simulate_response(np.zeros_like(self.model.gain_max, dtype=np.int64), self.model), self.model.supports

    def execute(self, round_index, cumulative):
        return simulate_response(cumulative, self.model)


@dataclass
class RoundRecord:
    round_index: int
    plan: AllocationPlan
    cumulative: np.ndarray
    metrics: ClassificationMetrics
    profile: ErrorProfile

    def to_dict(self) -> dict:
        return {"round": self.round_index, "plan": self.plan.to_dict(),
                "cumulative": self.cumulative.tolist(), "metrics": self.metrics.summary(),
                "profile": self.profile.to_dict()}


@dataclass
class LoopResult:
    policy: str
    budget: int
    baseline: ClassificationMetrics
    rounds: list[RoundRecord]

    @property
    def final(self) -> ClassificationMetrics:
        return self.rounds[-1].metrics if self.rounds else self.baseline

    def total_counts(self) -> np.ndarray:
        return self.rounds[-1].cumulative

    def to_dict(self) -> dict:
        return {"policy": self.policy, "budget": self.budget, "baseline": self.baseline.summary(),
                "rounds": [r.to_dict() for r in self.rounds]}


def run_loop(policy: str, B_total: int, rounds: int, executor: Executor, seed: int = 0,
             weights: A2CAWeights = A2CAWeights(), tail_k: int = 8) -> LoopResult:
    """Analyze, allocate, synthesize and retrain for ``rounds`` rounds.

    Static policies plan the whole budget from the baseline profile and spend
    it in equal slices; ``a2ca`` replans each slice from the newest profile.
    Rounds with nothing new to add reuse the previous metrics.
    """
    budgets = round_budgets(0 if policy == "no_synth" else B_total, rounds)
    domains = tuple(executor.domains)
    base_eval, real_support = executor.baseline()
    base_eval = _as_evaluation(base_eval)
    real_support = np.asarray(real_support, dtype=np.int64)
    C = len(real_support)
    history = [profile_from_eval(base_eval.for_profile, real_support, round_index=0)]
    if policy == "a2ca":
        slices = None
    else:
        full = allocate(policy, history[0], sum(budgets), domains, seed=seed, tail_k=tail_k)
        slices = split_plan(full, budgets)
    cumulative = np.zeros((C, len(domains)), dtype=np.int64)
    current = base_eval
    records = []
    for r, b in enumerate(budgets, start=1):
        if slices is None:
            plan = a2ca_round(history, b, domains, weights)
        else:
            plan = slices[r - 1]
        cumulative = cumulative + plan.counts
        if plan.budget > 0:
            try:
                current = _as_evaluation(executor.execute(r, cumulative.copy()))
            except Exception as exc:  # noqa: BLE001
                raise ExecutorFailure(f"executor failed: {exc}", r) from exc
        prof = profile_from_eval(current.for_profile, real_support + cumulative.sum(axis=1), round_index=r)
        history.append(prof)
        records.append(RoundRecord(r, plan, cumulative.copy(), current.report, prof))
    return LoopResult(policy, B_total, base_eval.report, records)


# ------------------------------------------------------------ sweeps, folds

def budget_sweep(policies: Sequence[str], budgets: Sequence[int], model: ResponseModel, rounds: int = 5,
                 seed: int = 0) -> list[dict]:
    rows = []
    for policy in policies:
        for B in budgets:
            res = run_loop(policy, B, rounds, ResponseExecutor(model), seed=seed, tail_k=model.tail_k)
            m = res.final
            rows.append({"policy": policy, "B": B, "acc": m.accuracy, "macro_f1": m.macro_f1,
                         "macro_f1_tail": m.macro_f1_tail})
    return rows


SWEEP_COLUMNS = ("policy", "B", "acc", "macro_f1", "macro_f1_tail")


def write_sweep_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in SWEEP_COLUMNS})


def second_differences(budgets: Sequence[float], values: Sequence[float]) -> list[float]:
    """Changes in slope between consecutive segments (handles uneven spacing)."""
    slopes = [(values[i + 1] - values[i]) / (budgets[i + 1] - budgets[i]) for i in range(len(values) - 1)]
    return [slopes[i + 1] - slopes[i] for i in range(len(slopes) - 1)]


def loso_folds(sources: Sequence[str]) -> list[tuple[list[str], str]]:
    """One fold per source, holding that source out."""
    sources = list(sources)
    if len(sources) < 2:
        raise InvalidArgument("leave-one-source-out needs at least two sources")
    if len(set(sources)) != len(sources):
        raise InvalidArgument("duplicate source tags")
    return [([s for s in sources if s != held], held) for held in sources]
