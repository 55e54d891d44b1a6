"""Config-driven experiment dispatch with deterministic outputs and run manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import platform
import struct
from dataclasses import asdict, fields
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np
import torch

from .. import __version__
from ..attention import cost_probe, linear_fit_r2
from ..cfm import CFMTrainConfig, component_report, euler_sample, gmm_sampler, sampler_log, train_cfm
from ..diagnoser import DiagnoserConfig, config_dict, evaluate, train
from ..errors import ConfigError
from ..features import ToyExtractor
from ..planner import (
    POLICIES,
    A2CAWeights,
    ResponseExecutor,
    allocate,
    budget_sweep,
    draw_response_model,
    profile_from_eval,
    run_loop,
    second_differences,
)
from ..unit_generator import UnitExample, UnitLMConfig, UnitSequence, generate, quantize_units, train_unit_lm
from .corpus import DEFAULT_LOOP_DIAGNOSER, CorpusSpec, Encoder, RetrainExecutor, encode_corpus, synth_clip, \
    synth_corpus, write_corpus
from .labels import CLASS_NAMES
from .metrics import frechet_distance, style_cosine, style_embedding
from .qa import DEFAULT_LEAK_PATTERNS, QAConfig, qa_screen

log = logging.getLogger(__name__)

EXPERIMENTS = ("gen-data", "train-diagnoser", "train-generator", "train-cfm", "plan", "loop", "bench-attn",
               "qa-text", "eval")
DEFAULT_OUT = "runs"

_NONNEG = {"type": "integer", "minimum": 0}
_POS = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["experiment"],
    "additionalProperties": False,
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "seed": _NONNEG,
        "out_dir": {"type": "string"},
        "corpus": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "class_counts": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 2,
                                 "maxItems": len(CLASS_NAMES)},
                "sample_rate": _POS,
                "duration_s": {"type": "number", "exclusiveMinimum": 0},
                "valid_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "write_clips": {"type": "boolean"},
            },
        },
        "encoding": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"T": _POS, "max_text": _POS},
        },
        "diagnoser": {
            "type": "object",
            "additionalProperties": False,
            "properties": {f.name: ({"type": "string"} if f.name == "loss_kind" else _NUM)
                           for f in fields(DiagnoserConfig)},
        },
        "planner": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "policy": {"enum": list(POLICIES)},
                "policies": {"type": "array", "items": {"enum": list(POLICIES)}, "minItems": 1},
                "budget": _NONNEG,
                "budgets": {"type": "array", "items": _NONNEG, "minItems": 1},
                "rounds": _POS,
                "executor": {"enum": ["response_model", "real_retrain"]},
                "model_seed": _NONNEG,
                "alpha": _NUM, "beta": _NUM, "gamma": _NUM,
                "temperature": {"type": "number", "exclusiveMinimum": 0},
                "confidence_weight": _NUM,
            },
        },
        "attention": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"ns": {"type": "array", "items": _POS, "minItems": 2}, "window": _NONNEG,
                           "n_global": _NONNEG},
        },
        "generator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {**{f.name: _NUM for f in fields(UnitLMConfig)}, "per_class": _POS, "units_len": _POS},
        },
        "cfm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {**{f.name: _NUM for f in fields(CFMTrainConfig)}, "samples": _POS,
                           "sample_steps": _POS},
        },
        "qa": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "texts": {"type": "array", "items": {"type": "string"}},
                "max_chars": _POS,
                "min_chars": _NONNEG,
                "leak_patterns": {"type": "array", "items": {"type": "string"}},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"per_class": _POS},
        },
    },
}


def _path(err: jsonschema.ValidationError) -> str:
    out = "$"
    for p in err.absolute_path:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def validate_config(cfg: dict) -> dict:
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _path(err))
    return cfg


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    return validate_config(cfg)


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def resolve_out_dir(cli_out: str | None, cfg: dict) -> Path:
    """``--out`` beats ``RESPAGENT_OUT`` beats the config beats the default."""
    if cli_out:
        return Path(cli_out)
    if os.environ.get("RESPAGENT_OUT"):
        return Path(os.environ["RESPAGENT_OUT"])
    if cfg.get("out_dir"):
        return Path(cfg["out_dir"])
    return Path(DEFAULT_OUT) / cfg["experiment"]


# ------------------------------------------------------------ file output

class RunWriter:
    """Collects result files and their digests under one output directory."""

    def __init__(self, out: Path):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.digests: dict[str, str] = {}

    def bytes(self, name: str, data: bytes) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
        self.digests[name] = hashlib.sha256(data).hexdigest()
        return p

    def json(self, name: str, obj) -> Path:
        return self.bytes(name, (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode())

    def csv(self, name: str, rows: list[dict], columns: list[str]) -> Path:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in columns})
        return self.bytes(name, buf.getvalue().encode("utf-8"))


def state_blob(state: dict[str, torch.Tensor]) -> bytes:
    """Timestamp-free tensor archive: JSON header, then raw little-endian data."""
    header, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        header.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset,
                       "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header, separators=(",", ":")).encode()
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def load_state_blob(data: bytes) -> dict[str, torch.Tensor]:
    (n,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + n])
    body = data[8 + n:]
    out = {}
    for h in header:
        arr = np.frombuffer(body[h["offset"]:h["offset"] + h["nbytes"]], dtype=h["dtype"]).reshape(h["shape"])
        out[h["name"]] = torch.from_numpy(arr.copy())
    return out


# ----------------------------------------------------------- config views

def _seed(cfg: dict) -> int:
    return int(cfg.get("seed", 0))


def corpus_spec(cfg: dict) -> CorpusSpec:
    c = {k: v for k, v in cfg.get("corpus", {}).items() if k != "write_clips"}
    if "class_counts" in c:
        c["class_counts"] = tuple(c["class_counts"])
    return CorpusSpec(seed=_seed(cfg), **c)


def diagnoser_config(cfg: dict, num_classes: int) -> DiagnoserConfig:
    base = {**asdict(DEFAULT_LOOP_DIAGNOSER), "seed": _seed(cfg), "classes": num_classes}
    for k, v in cfg.get("diagnoser", {}).items():
        base[k] = type(base[k])(v) if base[k] is not None else v
    base["classes"] = num_classes
    return DiagnoserConfig(**base)


def _encoding(cfg: dict) -> tuple[int, int]:
    e = cfg.get("encoding", {})
    return int(e.get("T", 32)), int(e.get("max_text", 16))


def _typed(dc, overrides: dict, **fixed):
    base = asdict(dc())
    base.update(fixed)
    for k, v in overrides.items():
        if k in base:
            base[k] = type(base[k])(v)
    return dc(**base)


# ------------------------------------------------------------ experiments

def exp_gen_data(cfg: dict, w: RunWriter) -> dict:
    corpus = synth_corpus(corpus_spec(cfg))
    w.bytes("manifest.json", corpus.manifest_bytes())
    if cfg.get("corpus", {}).get("write_clips", True):
        base = write_corpus(corpus, w.out)
        for f in sorted(base.rglob("*")):
            if f.is_file():
                w.digests[f.relative_to(w.out).as_posix()] = hashlib.sha256(f.read_bytes()).hexdigest()
    counts = {s: {CLASS_NAMES[c]: int(n) for c, n in enumerate(np.bincount(
        [x.label for x in corpus.split(s)], minlength=corpus.spec.num_classes))} for s in ("train", "valid", "test")}
    w.json("class_counts.json", counts)
    return {"corpus_digest": corpus.digest(), "n_clips": len(corpus.clips)}


def exp_train_diagnoser(cfg: dict, w: RunWriter) -> dict:
    corpus = synth_corpus(corpus_spec(cfg))
    T, max_text = _encoding(cfg)
    data, _ = encode_corpus(corpus, T, max_text)
    dcfg = diagnoser_config(cfg, corpus.spec.num_classes)
    res = train(data, dcfg)
    test, _ = evaluate(res.model, data.splits["test"], res.tail)
    w.csv("trajectory.csv", res.trajectory, ["epoch", "split", "accuracy", "macro_f1", "macro_f1_tail"])
    w.json("metrics.json", {"best_epoch": res.best_epoch, "tail": res.tail, "test": test.to_dict(),
                            "config": config_dict(dcfg)})
    w.bytes("diagnoser.bin", state_blob(res.model.state_dict()))
    return {"test": test.summary(), "best_epoch": res.best_epoch}


def _unit_examples(cfg: dict, gcfg: UnitLMConfig, per_class: int, units_len: int) -> list[UnitExample]:
    spec = corpus_spec(cfg)
    ext = ToyExtractor(feature_dim=gcfg.feature_dim)
    examples = []
    dom = spec.train_domains[0].name
    for c in range(min(gcfg.n_labels, spec.num_classes)):
        for i in range(per_class):
            clip = synth_clip(spec, c, dom, i, "train")
            feats = ext(clip.waveform)
            # leading band, fixed log-energy range shared by all clips
            units = quantize_units(feats[:units_len, 0], gcfg.V, lo=-4.0, hi=4.0)
            examples.append(UnitExample(c, torch.from_numpy(feats).float(), UnitSequence(units.tolist(), gcfg.V)))
    return examples


def exp_train_generator(cfg: dict, w: RunWriter) -> dict:
    g = cfg.get("generator", {})
    gcfg = _typed(UnitLMConfig, {k: v for k, v in g.items() if k not in ("per_class", "units_len")},
                  seed=_seed(cfg), epochs=4, hidden=32, heads=2, layers=1)
    examples = _unit_examples(cfg, gcfg, int(g.get("per_class", 2)), int(g.get("units_len", 12)))
    res = train_unit_lm(examples, gcfg)
    samples = []
    for ex in examples[:: max(1, len(examples) // 4)]:
        out = generate(res.model, res.model.prompt(ex.label, ex.style_frames), max_len=len(ex.units.units) + 2,
                       seed=_seed(cfg))
        samples.append({"label": ex.label, "reference": ex.units.units, "generated": out.units})
    w.csv("losses.csv", [{"epoch": i + 1, "loss": float(l)} for i, l in enumerate(res.losses)], ["epoch", "loss"])
    w.json("samples.json", samples)
    w.bytes("generator.bin", state_blob(res.model.state_dict()))
    return {"final_loss": float(res.losses[-1]) if res.losses else None, "n_examples": len(examples)}


GMM_MEANS = torch.tensor([[-2.0, 0.0], [2.0, 0.0]])


def exp_train_cfm(cfg: dict, w: RunWriter) -> dict:
    c = cfg.get("cfm", {})
    tcfg = _typed(CFMTrainConfig, {k: v for k, v in c.items() if k not in ("samples", "sample_steps")},
                  seed=_seed(cfg), hidden=64, depth=2, steps=1500)
    net, losses = train_cfm(gmm_sampler(GMM_MEANS, std=0.3), 2, 2, tcfg)
    n, steps = int(c.get("samples", 1000)), int(c.get("sample_steps", 32))
    report, logs = [], []
    for comp in range(GMM_MEANS.shape[0]):
        cond = torch.nn.functional.one_hot(torch.full((n,), comp), GMM_MEANS.shape[0]).float()
        seed = _seed(cfg) * 101 + comp
        xs = euler_sample(net, cond, (n, 2), steps=steps, sigma=tcfg.sigma, seed=seed)
        report.append({"component": comp, **component_report(xs, GMM_MEANS, comp)})
        logs.append(sampler_log(cond, steps, tcfg.sigma, seed))
    w.csv("losses.csv", [{"step": i + 1, "loss": float(l)} for i, l in enumerate(losses) if (i + 1) % 50 == 0],
          ["step", "loss"])
    w.json("components.json", report)
    w.json("sampler_runs.json", logs)
    w.bytes("vnet.bin", state_blob(net.state_dict()))
    return {"components": report}


def _planner(cfg: dict) -> dict:
    return cfg.get("planner", {})


def _weights(p: dict) -> A2CAWeights:
    return A2CAWeights(alpha=float(p.get("alpha", 1.0)), beta=float(p.get("beta", 1.0)),
                       gamma=float(p.get("gamma", 1.0)), temperature=float(p.get("temperature", 0.5)),
                       confidence=float(p.get("confidence_weight", 0.0)))


def _executor(cfg: dict):
    p = _planner(cfg)
    if p.get("executor", "response_model") == "real_retrain":
        corpus = synth_corpus(corpus_spec(cfg))
        T, max_text = _encoding(cfg)
        return RetrainExecutor(corpus, diagnoser_config(cfg, corpus.spec.num_classes), T, max_text)
    return ResponseExecutor(draw_response_model(int(p.get("model_seed", 0))))


def exp_plan(cfg: dict, w: RunWriter) -> dict:
    p = _planner(cfg)
    ex = _executor(cfg)
    base, support = ex.baseline()
    metrics = getattr(base, "for_profile", base)
    prof = profile_from_eval(metrics, support)
    plans = {}
    for policy in p.get("policies", [p.get("policy", "a2ca")]):
        plan = allocate(policy, prof, int(p.get("budget", 300)), ex.domains, seed=_seed(cfg), weights=_weights(p))
        plans[policy] = plan.to_dict()
    w.json("profile.json", prof.to_dict())
    w.json("plans.json", plans)
    return {"policies": sorted(plans)}


def exp_loop(cfg: dict, w: RunWriter) -> dict:
    p = _planner(cfg)
    rounds = int(p.get("rounds", 5))
    if "budgets" in p:
        model = draw_response_model(int(p.get("model_seed", 0)))
        policies = p.get("policies", list(POLICIES))
        rows = budget_sweep(policies, p["budgets"], model, rounds=rounds, seed=_seed(cfg))
        w.csv("sweep.csv", rows, ["policy", "B", "acc", "macro_f1", "macro_f1_tail"])
        concave = {}
        for pol in policies:
            vals = [r["macro_f1"] for r in rows if r["policy"] == pol]
            sd = second_differences(p["budgets"], vals)
            concave[pol] = bool(max(sd) <= 1e-9) if sd else True
        w.json("concavity.json", concave)
        return {"sweep_rows": len(rows)}
    ex = _executor(cfg)
    out = {}
    traj = []
    for policy in p.get("policies", [p.get("policy", "a2ca")]):
        res = run_loop(policy, int(p.get("budget", 300)), rounds, ex, seed=_seed(cfg), weights=_weights(p))
        out[policy] = res.to_dict()
        traj.append({"policy": policy, "round": 0, **res.baseline.summary()})
        traj += [{"policy": policy, "round": r.round_index, **r.metrics.summary()} for r in res.rounds]
    w.json("trajectory.json", out)
    w.csv("trajectory.csv", traj, ["policy", "round", "accuracy", "macro_f1", "macro_f1_tail"])
    return {p_: out[p_]["rounds"][-1]["metrics"] if out[p_]["rounds"] else out[p_]["baseline"] for p_ in out}


def exp_bench_attn(cfg: dict, w: RunWriter) -> dict:
    a = cfg.get("attention", {})
    ns = a.get("ns", [128, 256, 512, 1024, 2048])
    rows = cost_probe(ns, int(a.get("window", 32)), int(a.get("n_global", 126)))
    for r in rows:
        r["dense_pairs"] = r["n"] * r["n"]
    r2 = linear_fit_r2([r["n"] for r in rows], [r["scored_pairs"] for r in rows])
    w.csv("attention_cost.csv", rows, ["n", "w", "g", "scored_pairs", "dense_pairs"])
    w.json("fit.json", {"linear_r2": r2})
    return {"linear_r2": r2}


def exp_qa_text(cfg: dict, w: RunWriter) -> dict:
    q = cfg.get("qa", {})
    qcfg = QAConfig(max_chars=int(q.get("max_chars", 1200)), min_chars=int(q.get("min_chars", 40)),
                    leak_patterns=tuple(q.get("leak_patterns", DEFAULT_LEAK_PATTERNS)))
    texts = q.get("texts")
    if texts is None:
        texts = [c.summary for c in synth_corpus(corpus_spec(cfg)).clips]
    rows = [{"index": i, **qa_screen(t, qcfg).to_dict()} for i, t in enumerate(texts)]
    w.csv("qa_flags.csv", rows, ["index", "flag", "detail"])
    tally: dict[str, int] = {}
    for r in rows:
        tally[r["flag"]] = tally.get(r["flag"], 0) + 1
    w.json("qa_summary.json", tally)
    return {"flags": tally}


def exp_eval(cfg: dict, w: RunWriter) -> dict:
    """Toy style-embedding fidelity of the class-conditioned synthesizer vs real test clips."""
    spec = corpus_spec(cfg)
    corpus = synth_corpus(spec)
    enc = Encoder.for_corpus(corpus)
    per_class = int(cfg.get("eval", {}).get("per_class", 8))
    real = [style_embedding(enc.extractor(c.waveform)) for c in corpus.split("train")]
    dom = spec.train_domains[0].name
    fake, cos = [], []
    for c in range(spec.num_classes):
        ref = [style_embedding(enc.extractor(x.waveform)) for x in corpus.split("train") if x.label == c][0]
        for i in range(per_class):
            emb = style_embedding(enc.extractor(synth_clip(spec, c, dom, i).waveform))
            fake.append(emb)
            cos.append(style_cosine(ref, emb))
    res = {"frechet": frechet_distance(np.stack(real), np.stack(fake)), "style_cosine_mean": float(np.mean(cos))}
    w.json("eval.json", res)
    return res


RUNNERS: dict[str, Callable[[dict, RunWriter], dict]] = {
    "gen-data": exp_gen_data,
    "train-diagnoser": exp_train_diagnoser,
    "train-generator": exp_train_generator,
    "train-cfm": exp_train_cfm,
    "plan": exp_plan,
    "loop": exp_loop,
    "bench-attn": exp_bench_attn,
    "qa-text": exp_qa_text,
    "eval": exp_eval,
}


def versions() -> dict:
    return {"respagent": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "torch": torch.__version__}


def run_experiment(cfg: dict, out_dir=None, seed: int | None = None) -> dict:
    """Validate, run and write a manifest; returns the manifest."""
    cfg = validate_config(dict(cfg))
    if seed is not None:
        cfg["seed"] = int(seed)
    out = resolve_out_dir(str(out_dir) if out_dir is not None else None, cfg)
    torch.manual_seed(_seed(cfg))
    writer = RunWriter(out)
    summary = RUNNERS[cfg["experiment"]](cfg, writer)
    writer.json("summary.json", summary)
    manifest = {
        "experiment": cfg["experiment"],
        "config": cfg,
        "config_digest": config_digest(cfg),
        "seed": _seed(cfg),
        "versions": versions(),
        "results": dict(sorted(writer.digests.items())),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def run_experiment_file(path, out_dir=None, seed: int | None = None) -> dict:
    return run_experiment(load_config(path), out_dir=out_dir, seed=seed)
