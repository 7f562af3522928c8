"""
Tests for stage orchestration, checkpoints, replay determinism and the command line
"""

import json

import pytest

from corpusbias.cli import main
from corpusbias.config import (
    CdaConfig,
    CdaMode,
    EndpointConfig,
    EndpointSet,
    PipelineConfig,
    StereotypeConfig,
    TranscriptConfig,
    TranscriptMode,
)
from corpusbias.exceptions import ConfigError
from corpusbias.pipeline import FIELD_OWNERS, STAGES, Artifacts, Pipeline, report_summary, run_pipeline
from corpusbias.wordlist import save_wordlist

from conftest import STRONG_INDICATORS, StubBackend, detection_answer, sentence_of


def full_backend():
    return StubBackend(
        {
            "stereotype_detection": lambda r: detection_answer("always" in sentence_of(r)),
            "stereotype_assessment": lambda r: json.dumps(STRONG_INDICATORS),
            "text_verification": lambda r: "VALID",
            "word_swap": lambda r: "she",
        }
    )


@pytest.fixture
def workspace(tmp_path, tiny_corpus, gender_lists):
    corpus = tmp_path / "corpus.jsonl"
    corpus.write_text(
        "".join(json.dumps({"doc_id": d.doc_id, "text": d.text}) + "\n" for d in tiny_corpus), encoding="utf-8"
    )
    for wordlist in gender_lists:
        save_wordlist(wordlist, tmp_path / "lists" / f"{wordlist.group}.json")
    return tmp_path


@pytest.fixture
def make_config(workspace, gender_spec):
    def build(name="run", mode=TranscriptMode.LIVE, transcript=None, **overrides):
        stub = EndpointConfig(model="stub-model", parallelism=2)
        endpoints = EndpointSet(**{field: stub for field in EndpointSet.model_fields})
        return PipelineConfig(
            corpus=workspace / "corpus.jsonl",
            attribute=gender_spec,
            wordlist_dir=workspace / "lists",
            output_dir=workspace / name,
            endpoints=endpoints,
            transcript=TranscriptConfig(mode=mode, path=transcript),
            **overrides,
        )

    return build


class TestRun:
    def test_end_to_end(self, make_config):
        config = make_config()
        summary = Pipeline(config, full_backend()).run()
        out = config.output_dir
        for name in (
            Artifacts.BIAS_BEFORE, Artifacts.BIAS_AFTER, Artifacts.CUMULATIVE_DR, Artifacts.CDA_REPORT,
            Artifacts.DEBIASED, Artifacts.SUMMARY_JSON, Artifacts.SUMMARY_TXT, Artifacts.MANIFEST,
        ):
            assert (out / name).is_file(), name

        assert summary.counts_before == {"female": 3, "male": 11}
        assert summary.filtered_stereotypes == 1
        assert summary.skip_reasons == {"flagged_removed": 1, "not_relevant": 1, "political": 1, "year": 1}
        assert summary.modified_sentences == 2
        assert summary.counts_after == {"female": 6, "male": 7}
        assert summary.dr_after < summary.dr_before

        debiased = [json.loads(line) for line in (out / Artifacts.DEBIASED).read_text(encoding="utf-8").splitlines()]
        assert debiased[0]["text"] == "She is a software developer. She likes tea."
        assert debiased[1]["text"] == "The queen spoke to her women."

        manifest = json.loads((out / Artifacts.MANIFEST).read_text(encoding="utf-8"))
        assert manifest["stages"] == list(STAGES)
        assert manifest["cda_mode"] == "gc"
        assert Artifacts.DEBIASED in manifest["artifacts"]

    def test_base_mode_needs_no_llm_for_cda(self, make_config):
        config = make_config(cda=CdaConfig(mode=CdaMode.BASE, substitution_probability=1.0))
        backend = full_backend()
        summary = run_pipeline(config, backend)
        assert "text_verification" not in backend.purposes()
        assert summary.counts_after["male"] < summary.counts_before["male"]

    def test_resume_skips_completed_stages(self, make_config):
        config = make_config()
        Pipeline(config, full_backend()).run(until="score_filter")

        backend = StubBackend({"text_verification": lambda r: "VALID", "word_swap": lambda r: "she"})
        pipeline = Pipeline(config, backend)
        summary = pipeline.run(resume=True)
        assert not any(p.startswith("stereotype") for p in backend.purposes())
        assert summary.filtered_stereotypes == 1
        assert set(pipeline.timings) == {"cda", "build", "report"}

    def test_stage_order_is_enforced(self, make_config):
        pipeline = Pipeline(make_config(), full_backend())
        with pytest.raises(ConfigError):
            pipeline.run_stage("cda")
        with pytest.raises(ConfigError):
            pipeline.run_stage("translate")

    def test_in_memory_store_writes_reports_only(self, make_config):
        config = make_config(in_memory=True)
        Pipeline(config, full_backend()).run()
        assert not (config.output_dir / "metadata.jsonl").exists()
        assert (config.output_dir / Artifacts.SUMMARY_JSON).is_file()


class TestDeterminism:
    def test_replay_reproduces_every_artifact(self, make_config):
        recorded = make_config("recorded", TranscriptMode.RECORD)
        Pipeline(recorded, full_backend()).run()
        transcript = recorded.output_dir / Artifacts.TRANSCRIPT
        assert transcript.is_file()

        silent = StubBackend()
        replayed = make_config("replayed", TranscriptMode.REPLAY, transcript)
        Pipeline(replayed, silent).run()
        assert silent.calls == []

        names = sorted(p.name for p in replayed.output_dir.iterdir() if p.name != Artifacts.MANIFEST)
        assert Artifacts.DEBIASED in names
        for name in names:
            assert (replayed.output_dir / name).read_bytes() == (recorded.output_dir / name).read_bytes(), name


class TestFieldOwnership:
    def test_each_stage_writes_only_its_fields(self, make_config):
        pipeline = Pipeline(make_config(), full_backend())
        previous = {}
        entities = None
        for stage in STAGES:
            entities = pipeline.run_stage(stage, entities)
            current = {(e.doc_id, e.sent_id): e.metadata.model_dump() for e in entities}
            for key, fields in current.items():
                if key not in previous:
                    continue
                changed = {name for name, value in fields.items() if previous[key][name] != value}
                assert changed <= FIELD_OWNERS[stage], (stage, changed)
            previous = current

    def test_rerun_clears_fields_of_later_stages(self, make_config):
        backend = StubBackend(
            {
                "stereotype_detection": lambda r: detection_answer("software" in sentence_of(r)),
                "stereotype_assessment": lambda r: json.dumps(STRONG_INDICATORS),
                "text_verification": lambda r: "VALID",
                "word_swap": lambda r: "she",
            }
        )
        lenient = make_config(stereotype=StereotypeConfig(threshold=1.0))
        pipeline = Pipeline(lenient, backend)
        pipeline.run(until="cda")
        kept = [e for e in pipeline.store.read() if e.metadata.potential_stereotype and e.metadata.text_cda]
        assert kept, "the flagged sentence should have been rewritten at threshold 1.0"

        strict = Pipeline(make_config(stereotype=StereotypeConfig(threshold=0.5)), backend)
        strict.run_stage("score_filter")
        strict.run_stage("cda")
        stored = strict.store.read()
        flagged = [e for e in stored if e.metadata.remove_sentence]
        assert flagged
        assert all(e.metadata.text_cda is None for e in flagged)
        assert strict.store.completed_stages()[-1] == "cda"


class TestSummary:
    def test_empty_store(self, gender_spec):
        summary = report_summary([], gender_spec)
        assert summary.no_observations
        assert summary.counts_before == {"female": 0, "male": 0}
        assert summary.modified_sentences == 0
        assert summary.dr_before == pytest.approx(0.5)

    def test_table(self, gender_spec):
        table = report_summary([], gender_spec).table()
        assert list(table.index) == ["gender"]
        assert "DR after CDA" in table.columns


class TestCli:
    def write_config(self, workspace, **extra):
        path = workspace / "config.json"
        payload = {
            "corpus": "corpus.jsonl",
            "attribute": {"attribute": "gender", "groups": ["female", "male"]},
            "wordlist_dir": "lists",
            "output_dir": "cli-run",
        }
        payload.update(extra)
        path.write_text(json.dumps(payload), encoding="utf-8")
        return path

    def test_scan(self, workspace, capsys):
        config = self.write_config(workspace)
        assert main(["--config", str(config), "scan"]) == 0
        assert "gender: DR 0.2857" in capsys.readouterr().out
        assert (workspace / "cli-run" / Artifacts.BIAS_BEFORE).is_file()

    def test_missing_config(self):
        assert main(["scan"]) == 1

    def test_missing_referenced_file(self, workspace):
        config = self.write_config(workspace, wordlist_dir="nowhere")
        assert main(["--config", str(config), "scan"]) == 1

    def test_replay_without_transcript(self, workspace):
        config = self.write_config(workspace)
        assert main(["--config", str(config), "--transcript", "replay", "run"]) == 1
