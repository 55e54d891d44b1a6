"""Synthetic long-tail respiratory corpus, its persistence and model encoding.

Every class has a parametric signal family: a tonal "wheeze" in its own
frequency band (none for the control group), optional transient "crackle"
impulses, and breath-modulated noise. Each domain applies its own resampling,
high-pass band limit, gain and noise floor, so domains are shifted copies of
the same classes. Train and valid clips come from the training domains, test
clips only from held-out domains.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from ..diagnoser import DiagnoserConfig, DiagnoserData, EncodedSplit, evaluate, tail_classes, train
from ..errors import InvalidArgument
from ..features import ToyExtractor, crackle_spike
from ..planner import Evaluation
from ..weaving import UNK, align_features, reserve_layout
from .labels import CLASS_NAMES, scaled_counts

log = logging.getLogger(__name__)

REGIMES = ("technical", "enriched")
SPLIT_CODES = {"train": 0, "valid": 1, "test": 2, "synth": 3}
CRACKLE_THRESHOLD = 2.5


@dataclass(frozen=True)
class DomainSpec:
    name: str
    gain: float = 1.0
    highpass_hz: float = 0.0
    rate: float = 1.0
    noise: float = 0.02
    regime: str = "technical"
    sensor: str = "stethoscope"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise InvalidArgument(f"unknown summary regime {self.regime!r}")
        if self.gain <= 0 or self.rate <= 0 or self.noise < 0 or self.highpass_hz < 0:
            raise InvalidArgument(f"invalid transform for domain {self.name!r}")


DEFAULT_TRAIN_DOMAINS = (
    DomainSpec("clinic_a", gain=1.0, highpass_hz=0.0, rate=1.0, noise=0.02, regime="technical",
               sensor="electronic stethoscope"),
    DomainSpec("clinic_b", gain=0.75, highpass_hz=60.0, rate=1.015, noise=0.03, regime="enriched",
               sensor="digital stethoscope"),
)
DEFAULT_TEST_DOMAINS = (
    DomainSpec("field_c", gain=1.2, highpass_hz=100.0, rate=0.99, noise=0.025, regime="technical",
               sensor="smartphone microphone"),
)


@dataclass(frozen=True)
class ClassProfile:
    tone_hz: float | None
    tone_amp: float
    crackle_rate: float

    @property
    def events(self) -> str:
        strong = self.tone_hz is not None and self.tone_amp >= sum(TONE_AMP) / 2
        faint = self.tone_hz is not None and not strong
        crackles = self.crackle_rate > 0
        if strong and crackles:
            return "Wheezes and crackles"
        if strong:
            return "Wheezes"
        if crackles:
            return "Crackles with faint tonal sounds" if faint else "Crackles"
        if faint:
            return "Faint tonal sounds"
        return "No adventitious sounds"


_CRACKLE_CLASSES = {2, 3, 6, 10, 11, 15}
_STRONG_WHEEZE = {3, 4, 5, 9, 12, 13}

# difficulty knobs: breath noise level, tone amplitudes, pitch jitter, distractor tone ceiling
BREATH_NOISE = 0.1
TONE_AMP = (0.2, 0.12)
PITCH_JITTER_HZ = 30.0
DISTRACTOR_AMP = 0.25


def class_profile(c: int, sample_rate: int = 4000, n_bands: int = 16) -> ClassProfile:
    """Class ``c > 0`` gets a tone centred in extractor band ``c``."""
    if c == 0:
        return ClassProfile(None, 0.0, 0.0)
    band = (sample_rate / 2) / n_bands
    tone = band * (c % n_bands) + band * 0.6
    amp = TONE_AMP[0] if c in _STRONG_WHEEZE else TONE_AMP[1]
    return ClassProfile(tone, amp, 5.0 if c in _CRACKLE_CLASSES else 0.0)


@dataclass(frozen=True)
class CorpusSpec:
    class_counts: tuple[int, ...] = tuple(scaled_counts())
    train_domains: tuple[DomainSpec, ...] = DEFAULT_TRAIN_DOMAINS
    test_domains: tuple[DomainSpec, ...] = DEFAULT_TEST_DOMAINS
    sample_rate: int = 4000
    duration_s: float = 0.5
    valid_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not self.class_counts or len(self.class_counts) > len(CLASS_NAMES):
            raise InvalidArgument(f"need 1..{len(CLASS_NAMES)} classes")
        if min(self.class_counts) < 2:
            raise InvalidArgument("every class needs at least 2 clips per domain")
        if not self.train_domains or not self.test_domains:
            raise InvalidArgument("need at least one training and one held-out domain")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise InvalidArgument("domain tags must be unique and source-disjoint across splits")
        if not 0 <= self.valid_fraction < 1:
            raise InvalidArgument("valid_fraction must lie in [0, 1)")
        if self.n_samples < 256:
            raise InvalidArgument("clips are too short")

    @property
    def domains(self) -> tuple[DomainSpec, ...]:
        return self.train_domains + self.test_domains

    @property
    def num_classes(self) -> int:
        return len(self.class_counts)

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate * self.duration_s))

    def domain_index(self, name: str) -> int:
        return [d.name for d in self.domains].index(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_counts"] = list(self.class_counts)
        d["train_domains"] = [asdict(x) for x in self.train_domains]
        d["test_domains"] = [asdict(x) for x in self.test_domains]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        if "class_counts" in d:
            d["class_counts"] = tuple(d["class_counts"])
        for key in ("train_domains", "test_domains"):
            if key in d:
                d[key] = tuple(DomainSpec(**x) for x in d[key])
        return cls(**d)


@dataclass
class Clip:
    clip_id: str
    label: int
    domain: str
    split: str
    waveform: np.ndarray
    summary: str
    synthetic: bool = False

    def meta(self, sample_rate: int) -> dict:
        return {
            "clip_id": self.clip_id,
            "label": self.label,
            "label_name": CLASS_NAMES[self.label],
            "domain": self.domain,
            "split": self.split,
            "summary": self.summary,
            "sample_rate": sample_rate,
            "n_samples": int(self.waveform.shape[0]),
            "synthetic": self.synthetic,
        }


@dataclass
class Corpus:
    spec: CorpusSpec
    clips: list[Clip]

    def split(self, name: str) -> list[Clip]:
        return [c for c in self.clips if c.split == name]

    def labels(self) -> set[int]:
        return {c.label for c in self.clips}

    def train_support(self) -> np.ndarray:
        return np.bincount([c.label for c in self.split("train")], minlength=self.spec.num_classes)

    def manifest(self) -> dict:
        entries = [
            {"clip_id": c.clip_id, "split": c.split, "domain": c.domain, "label": c.label,
             "sha256": hashlib.sha256(c.waveform.astype("<f4").tobytes()).hexdigest(),
             "summary_sha256": hashlib.sha256(c.summary.encode()).hexdigest()}
            for c in sorted(self.clips, key=lambda c: c.clip_id)
        ]
        return {"spec": self.spec.to_dict(), "clips": entries}

    def manifest_bytes(self) -> bytes:
        return json.dumps(self.manifest(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> str:
        return hashlib.sha256(self.manifest_bytes()).hexdigest()


# ------------------------------------------------------------- synthesis

_SITES = ("left upper lobe", "right upper lobe", "left lower lobe", "right lower lobe", "trachea", "posterior chest")
_PHASES = ("inspiration", "expiration", "both phases")
_QUALITY = ("good", "fair", "noisy")
_SEX = ("male", "female")
_SMOKING = ("never smoker", "former smoker", "current smoker")
_SYMPTOMS = ("cough", "fever", "shortness of breath", "chest tightness", "fatigue", "sore throat")


def _rng(spec: CorpusSpec, split: str, domain: str, label: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence([spec.seed, SPLIT_CODES[split], spec.domain_index(domain), label, index])
    return np.random.default_rng(ss)


def summarize(profile: ClassProfile, dom: DomainSpec, rng: np.random.Generator) -> str:
    events = profile.events
    if dom.regime == "technical":
        return (f"Auscultation at the {rng.choice(_SITES)} using the {dom.sensor}. {events} during "
                f"{rng.choice(_PHASES)}. Recording quality is {rng.choice(_QUALITY)}.")
    age = int(rng.integers(2, 85))
    return (f"{age}-year-old {rng.choice(_SEX)}, {rng.choice(_SMOKING)}. Presents with "
            f"{rng.choice(_SYMPTOMS)}. {events} on auscultation.")


def _domain_transform(x: np.ndarray, dom: DomainSpec, sr: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    if dom.rate != 1.0:
        src = np.arange(n) * dom.rate
        x = np.interp(src, np.arange(n), x, right=0.0)
    if dom.highpass_hz > 0:
        spec = np.fft.rfft(x)
        freqs = np.fft.rfftfreq(n, 1.0 / sr)
        spec[freqs < dom.highpass_hz] = 0.0
        x = np.fft.irfft(spec, n)
    return dom.gain * x + dom.noise * rng.standard_normal(n)


def render_clip(label: int, dom: DomainSpec, spec: CorpusSpec, rng: np.random.Generator) -> tuple[np.ndarray, str]:
    """Waveform and summary for one clip of class ``label`` in domain ``dom``."""
    sr, n = spec.sample_rate, spec.n_samples
    t = np.arange(n) / sr
    prof = class_profile(label, sr)
    period = rng.uniform(0.8, 1.6)
    env = 0.75 + 0.25 * np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
    x = BREATH_NOISE * rng.standard_normal(n) * env
    if prof.tone_hz is not None:
        f = prof.tone_hz + rng.uniform(-PITCH_JITTER_HZ, PITCH_JITTER_HZ)
        amp = prof.tone_amp * rng.uniform(0.8, 1.2)
        x += amp * env * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    # a class-independent tone in another band
    band = (sr / 2) / 16
    other = (label + 1 + int(rng.integers(0, 15))) % 16
    f_d = band * other + band * 0.6 + rng.uniform(-PITCH_JITTER_HZ, PITCH_JITTER_HZ)
    x += rng.uniform(0, DISTRACTOR_AMP) * env * np.sin(2 * np.pi * f_d * t + rng.uniform(0, 2 * np.pi))
    if prof.crackle_rate > 0:
        k = max(1, int(rng.poisson(prof.crackle_rate)))
        burst = np.arange(int(0.004 * sr))
        shape = np.exp(-burst / (0.0008 * sr)) * np.sin(2 * np.pi * 0.42 * burst)
        for pos in rng.integers(0, n - burst.size, size=k):
            x[pos:pos + burst.size] += rng.uniform(0.8, 1.2) * shape
    x = _domain_transform(x, dom, sr, rng)
    return x.astype(np.float32), summarize(prof, dom, rng)


def synth_clip(spec: CorpusSpec, label: int, domain: str, index: int, split: str = "synth") -> Clip:
    """Deterministic clip ``index`` of one (split, domain, class) stream."""
    if not 0 <= label < spec.num_classes:
        raise InvalidArgument(f"label {label} outside the taxonomy")
    dom = spec.domains[spec.domain_index(domain)]
    wave, text = render_clip(label, dom, spec, _rng(spec, split, domain, label, index))
    cid = f"{split}-{domain}-c{label:02d}-{index:05d}"
    return Clip(cid, label, domain, split, wave, text, synthetic=(split == "synth"))


def synth_corpus(spec: CorpusSpec = CorpusSpec()) -> Corpus:
    clips = []
    for dom in spec.train_domains:
        for c, n in enumerate(spec.class_counts):
            clips += [synth_clip(spec, c, dom.name, i, "train") for i in range(n)]
            n_valid = math.ceil(n * spec.valid_fraction)
            clips += [synth_clip(spec, c, dom.name, i, "valid") for i in range(n_valid)]
    for dom in spec.test_domains:
        for c, n in enumerate(spec.class_counts):
            clips += [synth_clip(spec, c, dom.name, i, "test") for i in range(n)]
    train_dom = {c.domain for c in clips if c.split in ("train", "valid")}
    test_dom = {c.domain for c in clips if c.split == "test"}
    if train_dom & test_dom:
        raise AssertionError(f"domains leak across splits: {sorted(train_dom & test_dom)}")
    return Corpus(spec, clips)


def write_corpus(corpus: Corpus, root) -> Path:
    """``corpus/<split>/<domain>/<clip_id>.{f32,json}`` plus ``manifest.json``."""
    base = Path(root) / "corpus"
    for clip in corpus.clips:
        d = base / clip.split / clip.domain
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{clip.clip_id}.f32").write_bytes(clip.waveform.astype("<f4").tobytes())
        (d / f"{clip.clip_id}.json").write_text(json.dumps(clip.meta(corpus.spec.sample_rate), sort_keys=True))
    (base / "manifest.json").write_bytes(corpus.manifest_bytes())
    return base


def read_clip(path) -> Clip:
    p = Path(path)
    meta = json.loads(p.with_suffix(".json").read_text())
    wave = np.frombuffer(p.with_suffix(".f32").read_bytes(), dtype="<f4").copy()
    return Clip(meta["clip_id"], meta["label"], meta["domain"], meta["split"], wave, meta["summary"],
                meta["synthetic"])


# --------------------------------------------------------------- encoding

_WORD = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*")
FIRST_WORD_ID = UNK + 1


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass
class Tokenizer:
    """Whitespace-and-punctuation word vocabulary; unseen words map to UNK."""

    vocab: dict[str, int] = field(default_factory=dict)

    @classmethod
    def fit(cls, texts: Iterable[str]) -> "Tokenizer":
        seen = sorted({w for t in texts for w in words(t)})
        return cls({w: FIRST_WORD_ID + i for i, w in enumerate(seen)})

    @property
    def size(self) -> int:
        return FIRST_WORD_ID + len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.vocab.get(w, UNK) for w in words(text)]


@dataclass
class Encoder:
    tokenizer: Tokenizer
    extractor: ToyExtractor
    T: int
    max_text: int

    @classmethod
    def for_corpus(cls, corpus: Corpus, T: int = 32, max_text: int = 16, feature_dim: int = 16) -> "Encoder":
        n = corpus.spec.n_samples
        frame_len = 128
        hop = max(1, (n - frame_len) // max(T - 1, 1))
        tok = Tokenizer.fit(c.summary for c in corpus.split("train"))
        return cls(tok, ToyExtractor(feature_dim=feature_dim, frame_len=frame_len, hop=hop), T, max_text)

    def encode(self, clips: Sequence[Clip]) -> EncodedSplit:
        ids, feats = [], []
        for clip in clips:
            row, _ = reserve_layout(self.tokenizer.encode(clip.summary), self.max_text, self.T)
            ids.append(row)
            feats.append(align_features(torch.from_numpy(self.extractor(clip.waveform)), self.T))
        D = self.extractor.feature_dim
        return EncodedSplit(
            torch.tensor(ids, dtype=torch.long).reshape(len(clips), self.seq_len),
            torch.stack(feats).float() if feats else torch.zeros(0, self.T, D),
            torch.tensor([c.label for c in clips], dtype=torch.long),
            [c.domain for c in clips],
        )

    @property
    def seq_len(self) -> int:
        return self.max_text + 3 + self.T

    def dataset(self, splits: dict[str, EncodedSplit]) -> DiagnoserData:
        _, layout = reserve_layout([], self.max_text, self.T)
        return DiagnoserData(splits, self.tokenizer.size, layout, self.seq_len, self.extractor.feature_dim)


def encode_corpus(corpus: Corpus, T: int = 32, max_text: int = 16) -> tuple[DiagnoserData, Encoder]:
    enc = Encoder.for_corpus(corpus, T, max_text)
    splits = {s: enc.encode(corpus.split(s)) for s in ("train", "valid", "test")}
    return enc.dataset(splits), enc


def control_crackle_scores(corpus: Corpus, encoder: Encoder | None = None) -> list[float]:
    enc = encoder or Encoder.for_corpus(corpus)
    return [crackle_spike(enc.extractor(c.waveform)) for c in corpus.clips if c.label == 0]


# ------------------------------------------------------ retrain executor

DEFAULT_LOOP_DIAGNOSER = DiagnoserConfig(layers=2, heads=2, hidden=32, window=8, anchor_stride=4, epochs=12,
                                         batch_size=32, learning_rate=3e-3, seed=0)


class RetrainExecutor:
    """Retrains the diagnoser from scratch on real plus injected synthetic clips.

    The planning profile comes from the training-domain validation split; the
    reported metrics come from the held-out test domain.
    """

    def __init__(self, corpus: Corpus, cfg: DiagnoserConfig = DEFAULT_LOOP_DIAGNOSER, T: int = 32,
                 max_text: int = 16):
        if cfg.classes != corpus.spec.num_classes:
            cfg = DiagnoserConfig(**{**asdict(cfg), "classes": corpus.spec.num_classes})
        self.corpus = corpus
        self.cfg = cfg
        self.data, self.encoder = encode_corpus(corpus, T, max_text)
        self.domains = tuple(d.name for d in corpus.spec.train_domains)
        self.support = corpus.train_support()
        self.tail = tail_classes(self.support, cfg.tail_k)
        self._synth: dict[tuple[int, str], list[EncodedSplit]] = {}
        self.history: list[dict] = []
        self._baseline: Evaluation | None = None

    def _synthetic(self, counts: np.ndarray) -> EncodedSplit | None:
        parts = []
        for c in range(counts.shape[0]):
            for j, dom in enumerate(self.domains):
                n = int(counts[c, j])
                cache = self._synth.setdefault((c, dom), [])
                while len(cache) < n:
                    cache.append(self.encoder.encode([synth_clip(self.corpus.spec, c, dom, len(cache))]))
                parts += cache[:n]
        if not parts:
            return None
        out = parts[0]
        for p in parts[1:]:
            out = out.concat(p)
        return out

    def _fit(self, counts: np.ndarray | None) -> Evaluation:
        splits = dict(self.data.splits)
        extra = self._synthetic(counts) if counts is not None else None
        if extra is not None:
            splits["train"] = splits["train"].concat(extra)
        data = DiagnoserData(splits, self.data.vocab_size, self.data.layout, self.data.seq_len,
                             self.data.feature_dim)
        res = train(data, self.cfg, eval_splits=["valid"], tail=self.tail)
        valid, _ = evaluate(res.model, splits["valid"], self.tail)
        test, _ = evaluate(res.model, splits["test"], self.tail)
        self.history.append({"n_train": len(splits["train"]), "best_epoch": res.best_epoch,
                             "valid": valid.summary(), "test": test.summary()})
        return Evaluation(report=test, profile=valid)

    def baseline(self):
        # B = 0 retraining is deterministic, so policies share it
        if self._baseline is None:
            self._baseline = self._fit(None)
        return self._baseline, self.support

    def execute(self, round_index: int, cumulative: np.ndarray) -> Evaluation:
        return self._fit(np.asarray(cumulative))
