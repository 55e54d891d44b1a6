import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qa_cases import QA_CASES
from respagent.benchkit import cli
from respagent.benchkit.corpus import (
    CRACKLE_THRESHOLD,
    DEFAULT_TEST_DOMAINS,
    DEFAULT_TRAIN_DOMAINS,
    CorpusSpec,
    DomainSpec,
    Tokenizer,
    class_profile,
    control_crackle_scores,
    encode_corpus,
    read_clip,
    synth_clip,
    synth_corpus,
    write_corpus,
)
from respagent.benchkit.experiments import (
    load_state_blob,
    resolve_out_dir,
    run_experiment,
    state_blob,
    validate_config,
)
from respagent.benchkit.labels import CLASS_NAMES, TAXONOMY_COUNTS, class_index, scaled_counts, unify_label
from respagent.benchkit.metrics import (
    frechet_distance,
    frechet_from_stats,
    gaussian_stats,
    style_cosine,
    style_embedding,
)
from respagent.benchkit.qa import QAConfig, QAFlag, qa_screen
from respagent.errors import ConfigError, InvalidArgument

SMALL = CorpusSpec(class_counts=(6, 4, 2))


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus()


class TestLabels:
    @pytest.mark.parametrize("raw,unified", [
        ("Bronchiectasia", "Bronchiectasis"),
        ("Acute upper respiratory infection", "URTI"),
        ("Pneumonia (severe)", "Pneumonia"),
        ("Pneumonia (non-severe)", "Pneumonia"),
        ("Asthma", "Asthma"),
    ])
    def test_mappings(self, raw, unified):
        assert unify_label(raw) == unified

    def test_unknown_passes_through_logged(self, caplog):
        with caplog.at_level(logging.INFO):
            assert unify_label("Whooping cough") == "Whooping cough"
        assert "outside" in caplog.text

    def test_class_index(self):
        assert class_index("Bronchiectasia") == CLASS_NAMES.index("Bronchiectasis")

    def test_sixteen_classes_sum(self):
        assert len(CLASS_NAMES) == 16
        assert sum(c for _, c in TAXONOMY_COUNTS) == 238_074

    def test_scaled_counts(self):
        counts = scaled_counts()
        assert counts[:3] == [314, 156, 4]
        assert min(counts) == 2
        assert counts == sorted(counts, reverse=True)

    def test_tail_share(self):
        counts = np.array(scaled_counts())
        assert np.sort(counts)[:8].sum() / counts.sum() < 0.05


class TestQA:
    @pytest.mark.parametrize("text,flag", QA_CASES)
    def test_fixture(self, text, flag):
        assert qa_screen(text).flag.value == flag

    def test_fixture_shape(self):
        flags = [f for _, f in QA_CASES]
        assert len(QA_CASES) == 12
        assert all(flags.count(f.value) == 3 for f in QAFlag)

    def test_leak_beats_overlong(self):
        text = "As an AI, " + "wheezes heard. " * 200
        assert qa_screen(text).flag is QAFlag.PROMPT_LEAK

    def test_custom_thresholds(self):
        cfg = QAConfig(max_chars=50, min_chars=5, leak_patterns=())
        assert qa_screen("Short but complete.", cfg).flag is QAFlag.OK
        assert qa_screen("As an AI I think this is fine and long enough to pass.", cfg).flag is QAFlag.OVERLONG

    @settings(max_examples=200, deadline=None)
    @given(st.text(max_size=1500))
    def test_total(self, text):
        assert qa_screen(text).flag in set(QAFlag)

    def test_corpus_summaries_pass(self, corpus):
        assert all(qa_screen(c.summary).flag is QAFlag.OK for c in corpus.clips[:200])


class TestFrechet:
    def test_identical_sets(self):
        x = np.random.default_rng(0).normal(size=(50, 4))
        assert frechet_distance(x, x) == pytest.approx(0.0, abs=1e-8)

    def test_one_dim_closed_form(self):
        assert frechet_from_stats([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0, abs=1e-6)
        # sets whose sample mean/variance are exactly (0, 1) and (1, 1)
        a = np.array([-1.0, 1.0]) / np.sqrt(2)
        assert frechet_distance(a, a + 1.0) == pytest.approx(1.0, abs=1e-6)

    def test_variance_term(self):
        assert frechet_from_stats([0.0], [[1.0]], [0.0], [[4.0]]) == pytest.approx(1.0, abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(40, 3)), rng.normal(1.0, 2.0, size=(30, 3))
        assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), abs=1e-10)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000))
    def test_rotation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(30, 3)), rng.normal(0.5, 1.5, size=(25, 3))
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        assert frechet_distance(a @ q, b @ q) == pytest.approx(frechet_distance(a, b), abs=1e-6)

    def test_degenerate_regularized(self, caplog):
        a = np.zeros((5, 2))
        a[:, 0] = np.arange(5)
        with caplog.at_level(logging.INFO):
            d = frechet_distance(a, a + [1.0, 0.0])
        assert d == pytest.approx(1.0, abs=1e-4)
        assert "degenerate" in caplog.text

    def test_errors(self):
        with pytest.raises(InvalidArgument):
            gaussian_stats(np.zeros((1, 3)))
        with pytest.raises(InvalidArgument):
            frechet_distance(np.zeros((3, 2)), np.zeros((3, 3)))


class TestStyleCosine:
    def test_cases(self):
        a = np.array([1.0, -2.0, 3.0])
        assert style_cosine(a, a) == pytest.approx(1.0)
        assert style_cosine([1, 0], [0, 1]) == pytest.approx(0.0)
        assert style_cosine(a, 2 * a) == pytest.approx(1.0)
        assert style_cosine(a, -a) == pytest.approx(-1.0)

    def test_zero_vector(self):
        with pytest.raises(InvalidArgument):
            style_cosine([0, 0], [1, 0])

    def test_embedding_is_time_mean(self):
        f = np.arange(12, dtype=float).reshape(4, 3)
        assert np.allclose(style_embedding(f), f.mean(0))


class TestCorpus:
    def test_label_set(self, corpus):
        assert corpus.labels() == set(range(16))

    def test_split_sizes(self, corpus):
        assert [len(corpus.split(s)) for s in ("train", "valid", "test")] == [1000, 264, 500]

    def test_manifest_deterministic(self, corpus):
        assert synth_corpus().manifest_bytes() == corpus.manifest_bytes()
        assert synth_corpus(CorpusSpec(seed=1)).digest() != corpus.digest()

    def test_source_disjoint(self, corpus):
        train = {c.domain for c in corpus.clips if c.split in ("train", "valid")}
        test = {c.domain for c in corpus.split("test")}
        assert train and test and not train & test

    def test_shared_domain_rejected(self):
        with pytest.raises(InvalidArgument):
            CorpusSpec(test_domains=DEFAULT_TRAIN_DOMAINS[:1])

    @pytest.mark.parametrize("counts", [(), (3, 1), tuple([2] * 17)])
    def test_infeasible_counts(self, counts):
        with pytest.raises(InvalidArgument):
            CorpusSpec(class_counts=counts)

    def test_long_tail_train_support(self, corpus):
        sup = corpus.train_support()
        assert list(sup) == sorted(sup, reverse=True)
        assert np.sort(sup)[:8].sum() / sup.sum() < 0.05

    def test_control_below_crackle_threshold(self, corpus):
        scores = control_crackle_scores(corpus)
        assert len(scores) > 100
        assert max(scores) < CRACKLE_THRESHOLD

    def test_control_profile_is_silent(self):
        p = class_profile(0)
        assert p.tone_hz is None and p.crackle_rate == 0
        assert p.events == "No adventitious sounds"

    def test_summary_regimes(self, corpus):
        for clip in corpus.split("valid")[:20]:
            regime = {d.name: d.regime for d in DEFAULT_TRAIN_DOMAINS}[clip.domain]
            assert ("year-old" in clip.summary) == (regime == "enriched")
            assert class_profile(clip.label).events in clip.summary

    def test_domain_shift(self):
        a = synth_clip(SMALL, 1, DEFAULT_TRAIN_DOMAINS[0].name, 0)
        b = synth_clip(SMALL, 1, DEFAULT_TEST_DOMAINS[0].name, 0)
        assert not np.allclose(a.waveform, b.waveform)

    def test_synth_ids_and_determinism(self):
        a = synth_clip(SMALL, 2, "clinic_a", 7)
        assert a.clip_id == "synth-clinic_a-c02-00007" and a.synthetic
        assert np.array_equal(a.waveform, synth_clip(SMALL, 2, "clinic_a", 7).waveform)
        with pytest.raises(InvalidArgument):
            synth_clip(SMALL, 3, "clinic_a", 0)

    def test_write_read_roundtrip(self, tmp_path):
        c = synth_corpus(SMALL)
        base = write_corpus(c, tmp_path)
        clip = c.split("test")[0]
        path = base / "test" / clip.domain / f"{clip.clip_id}.f32"
        back = read_clip(path)
        assert np.array_equal(back.waveform, clip.waveform)
        assert (back.label, back.domain, back.summary) == (clip.label, clip.domain, clip.summary)
        meta = json.loads(path.with_suffix(".json").read_text())
        assert meta["sample_rate"] == 4000
        assert json.loads((base / "manifest.json").read_text()) == c.manifest()

    def test_spec_roundtrip(self):
        assert CorpusSpec.from_dict(SMALL.to_dict()) == SMALL

    def test_domain_spec_validation(self):
        with pytest.raises(InvalidArgument):
            DomainSpec("x", regime="other")


class TestEncoding:
    def test_shapes(self):
        data, enc = encode_corpus(synth_corpus(SMALL), T=32, max_text=16)
        tr = data.splits["train"]
        assert tr.features.shape[1:] == (32, 16)
        assert tr.token_ids.shape[1] == data.seq_len == 16 + 3 + 32
        assert enc.extractor.n_frames(SMALL.n_samples) == 32

    def test_tokenizer_unknown(self):
        tok = Tokenizer.fit(["wheezes heard"])
        ids = tok.encode("wheezes unseen")
        assert ids[0] != ids[1] and ids[1] == tok.encode("other")[0]


class TestConfig:
    def test_minimal(self):
        assert validate_config({"experiment": "bench-attn"})["experiment"] == "bench-attn"

    @pytest.mark.parametrize("cfg,path", [
        ({}, "$"),
        ({"experiment": "fly"}, "$.experiment"),
        ({"experiment": "plan", "planner": {"budget": -1}}, "$.planner.budget"),
        ({"experiment": "plan", "planner": {"policy": "greedy"}}, "$.planner.policy"),
        ({"experiment": "gen-data", "corpus": {"class_counts": [5, 1]}}, "$.corpus.class_counts[1]"),
        ({"experiment": "qa-text", "extra": 1}, "$"),
    ])
    def test_errors_carry_path(self, cfg, path):
        with pytest.raises(ConfigError) as err:
            validate_config(cfg)
        assert err.value.path == path

    def test_out_dir_precedence(self, monkeypatch):
        cfg = {"experiment": "plan", "out_dir": "from_cfg"}
        monkeypatch.delenv("RESPAGENT_OUT", raising=False)
        assert str(resolve_out_dir(None, cfg)) == "from_cfg"
        assert str(resolve_out_dir(None, {"experiment": "plan"})).endswith("plan")
        monkeypatch.setenv("RESPAGENT_OUT", "from_env")
        assert str(resolve_out_dir(None, cfg)) == "from_env"
        assert str(resolve_out_dir("from_cli", cfg)) == "from_cli"

    def test_state_blob_roundtrip(self):
        import torch

        state = {"w": torch.arange(6, dtype=torch.float32).reshape(2, 3), "n": torch.tensor([3], dtype=torch.int64)}
        blob = state_blob(state)
        back = load_state_blob(blob)
        assert all(torch.equal(back[k], state[k]) for k in state)
        assert state_blob(back) == blob


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


class TestExperiments:
    def test_bench_attn(self, tmp_path):
        m = run_experiment({"experiment": "bench-attn"}, out_dir=tmp_path)
        rows = (tmp_path / "attention_cost.csv").read_text().splitlines()
        assert rows[0] == "n,w,g,scored_pairs,dense_pairs"
        counts = [int(r.split(",")[3]) for r in rows[1:]]
        assert counts == sorted(counts) and len(counts) == 5
        assert json.loads((tmp_path / "fit.json").read_text())["linear_r2"] > 0.99
        assert set(m["results"]) == {"attention_cost.csv", "fit.json", "summary.json"}

    def test_no_synth_loop_flat(self, tmp_path):
        cfg = {"experiment": "loop", "planner": {"policy": "no_synth", "budget": 300, "rounds": 5}}
        run_experiment(cfg, out_dir=tmp_path)
        lines = (tmp_path / "trajectory.csv").read_text().splitlines()[1:]
        assert len(lines) == 6
        assert len({ln.split(",", 2)[2] for ln in lines}) == 1

    def test_sweep_csv(self, tmp_path):
        cfg = {"experiment": "loop", "planner": {"budgets": [0, 100, 200], "policies": ["a2ca", "random"]}}
        run_experiment(cfg, out_dir=tmp_path)
        rows = (tmp_path / "sweep.csv").read_text().splitlines()
        assert rows[0] == "policy,B,acc,macro_f1,macro_f1_tail" and len(rows) == 7
        assert json.loads((tmp_path / "concavity.json").read_text()) == {"a2ca": True, "random": True}

    def test_plan_conserves(self, tmp_path):
        cfg = {"experiment": "plan", "planner": {"policies": ["a2ca", "class_prior", "random"], "budget": 77}}
        run_experiment(cfg, out_dir=tmp_path)
        plans = json.loads((tmp_path / "plans.json").read_text())
        assert all(np.sum(p["counts"]) == 77 for p in plans.values())

    def test_qa_text(self, tmp_path):
        cfg = {"experiment": "qa-text", "qa": {"texts": [t for t, _ in QA_CASES]}}
        run_experiment(cfg, out_dir=tmp_path)
        lines = (tmp_path / "qa_flags.csv").read_text().splitlines()[1:]
        assert [ln.split(",")[1] for ln in lines] == [f for _, f in QA_CASES]

    def test_gen_data_layout(self, tmp_path):
        m = run_experiment({"experiment": "gen-data", "corpus": {"class_counts": [4, 2]}}, out_dir=tmp_path)
        assert (tmp_path / "corpus" / "test" / "field_c" / "test-field_c-c01-00000.f32").exists()
        assert "corpus/manifest.json" in m["results"]

    def test_seed_override(self, tmp_path):
        a = run_experiment({"experiment": "gen-data", "corpus": {"class_counts": [2, 2], "write_clips": False}},
                           out_dir=tmp_path / "a", seed=3)
        assert a["seed"] == 3 and a["config"]["seed"] == 3

    @pytest.mark.parametrize("cfg", [
        {"experiment": "gen-data", "corpus": {"class_counts": [3, 2]}},
        {"experiment": "plan", "planner": {"policy": "random", "budget": 50}},
        {"experiment": "qa-text"},
        {"experiment": "eval", "corpus": {"class_counts": [3, 2]}, "eval": {"per_class": 2}},
    ])
    def test_deterministic(self, tmp_path, cfg):
        a = run_experiment(cfg, out_dir=tmp_path / "a")
        b = run_experiment(cfg, out_dir=tmp_path / "b")
        assert a["results"] == b["results"]
        assert (tmp_path / "a" / "run_manifest.json").read_bytes() == (tmp_path / "b" / "run_manifest.json").read_bytes()


class TestCLI:
    def test_success(self, tmp_path, capsys):
        path = _write(tmp_path, {"experiment": "bench-attn", "attention": {"ns": [64, 128], "window": 4,
                                                                            "n_global": 8}})
        assert cli.main(["bench-attn", "--config", path, "--out", str(tmp_path / "o")]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["experiment"] == "bench-attn"
        assert (tmp_path / "o" / "run_manifest.json").exists()

    def test_env_out(self, tmp_path, monkeypatch):
        monkeypatch.setenv("RESPAGENT_OUT", str(tmp_path / "env"))
        path = _write(tmp_path, {"experiment": "qa-text", "qa": {"texts": ["fine text that is long enough to pass."]}})
        assert cli.main(["qa-text", "--config", path]) == 0
        assert (tmp_path / "env" / "qa_flags.csv").exists()

    def test_schema_error(self, tmp_path, capsys):
        path = _write(tmp_path, {"experiment": "plan", "planner": {"rounds": 0}})
        assert cli.main(["plan", "--config", path, "--out", str(tmp_path)]) == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "config" and err["path"] == "$.planner.rounds"

    def test_bad_json_and_missing(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli.main(["plan", "--config", str(bad)]) == 2
        assert cli.main(["plan", "--config", str(tmp_path / "nope.json")]) == 2

    def test_subcommand_mismatch(self, tmp_path, capsys):
        path = _write(tmp_path, {"experiment": "plan"})
        assert cli.main(["loop", "--config", path, "--out", str(tmp_path)]) == 2
        assert json.loads(capsys.readouterr().err)["path"] == "$.experiment"

    def test_failure_exit(self, tmp_path, capsys):
        path = _write(tmp_path, {"experiment": "bench-attn", "attention": {"ns": [8, 16], "n_global": 64}})
        assert cli.main(["bench-attn", "--config", path, "--out", str(tmp_path)]) == 1
        assert json.loads(capsys.readouterr().err)["error"] == "InvalidArgument"
