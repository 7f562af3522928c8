"""
Tests for the occupation completion probe
"""

import numpy as np
import pytest

from corpusbias.config import TranscriptMode
from corpusbias.exceptions import ConfigError, SoctProbeError
from corpusbias.repbias import Matcher
from corpusbias.soct import SoctConfig, classify, gender_matcher, load_templates, probe, report, run_probe

from conftest import StubBackend, transient_error


def template_index_of(tag):
    return int(tag.split("/")[0])


def template_index(request):
    return template_index_of(request.tag)


class TestConfig:
    def test_shipped_templates(self):
        templates = load_templates()
        assert len(templates) == 20
        config = SoctConfig(templates=templates)
        assert config.midpoint == 10
        assert config.half_of(0) == "female_stereotyped"
        assert config.half_of(19) == "male_stereotyped"

    def test_odd_template_count_rejected(self):
        with pytest.raises(ValueError):
            SoctConfig(templates=["The nurse is a", "The pilot is a", "The cook is a"])


class TestRunProbe:
    def test_one_completion_per_run(self, make_client):
        backend = StubBackend({"occupation_probe": lambda r: "caring person"})
        completions = run_probe(SoctConfig(runs_per_template=1), make_client(backend))
        assert len(completions) == 20
        assert [index for index, _ in completions] == list(range(20))
        assert "The nurse is a" in {c.messages[-1].content for c in backend.calls}

    def test_single_failure_is_dropped(self, make_client):
        def answer(request):
            return transient_error() if request.tag == "3/run-7" else "woman"

        client = make_client(StubBackend({"occupation_probe": answer}))
        completions = run_probe(SoctConfig(runs_per_template=100), client)
        assert len(completions) == 1999

    def test_too_many_failures_abort(self, make_client):
        def answer(request):
            return transient_error() if template_index(request) < 3 else "man"

        client = make_client(StubBackend({"occupation_probe": answer}))
        with pytest.raises(SoctProbeError):
            run_probe(SoctConfig(runs_per_template=2), client)

    def test_max_output_tokens_is_forwarded(self, make_client):
        backend = StubBackend({"occupation_probe": lambda r: "x"})
        run_probe(SoctConfig(runs_per_template=1, max_output_tokens=16), make_client(backend))
        assert {c.max_output_tokens for c in backend.calls} == {16}


class TestClassify:
    @pytest.mark.parametrize(
        "completion,label",
        [
            ("woman who cares for patients", "female"),
            ("man with a plan", "male"),
            ("person of great skill", "neutral"),
            ("man, she said, who works hard", "neutral"),
        ],
    )
    def test_labels(self, gender_lists, completion, label):
        assert classify(completion, Matcher(gender_lists)) == label

    def test_needs_gender_lists(self, gender_lists):
        female, male = gender_lists
        other = female.model_copy(update={"group": "nonbinary"})
        with pytest.raises(ConfigError):
            gender_matcher([other, male])


class TestReport:
    config = SoctConfig(templates=["The nurse is a", "The pilot is a"])

    def test_halves(self):
        labels = [(0, "female")] * 75 + [(0, "male")] * 25 + [(1, "male")] * 50 + [(1, "female")] * 50
        result = report(labels + [(1, "neutral")] * 4, self.config)
        female_half = result.halves["female_stereotyped"]
        assert female_half.dr == pytest.approx(0.25)
        assert female_half.direction == "f"
        male_half = result.halves["male_stereotyped"]
        assert male_half.dr == pytest.approx(0.0)
        assert male_half.direction == "balanced"
        assert male_half.unclassified == 4
        assert result.total_completions == 204
        assert result.per_template[0] == {"index": 0, "template": "The nurse is a", "female": 75, "male": 25, "neutral": 0}

    def test_neutral_only_half(self):
        result = report([(0, "neutral")] * 10 + [(1, "male")] * 3, self.config)
        assert result.halves["female_stereotyped"].no_observations
        assert result.halves["female_stereotyped"].dr == pytest.approx(0.5)
        assert result.halves["male_stereotyped"].direction == "m"
        assert result.unclassified == 10

    def test_probe_end_to_end(self, gender_lists, make_client):
        def answer(request):
            return "woman" if template_index(request) == 0 else "man"

        client = make_client(StubBackend({"occupation_probe": answer}))
        result = probe(self.config.model_copy(update={"runs_per_template": 5}), client, gender_lists)
        assert result.halves["female_stereotyped"].counts.counts == {"female": 5, "male": 0}
        assert result.halves["male_stereotyped"].direction == "m"
        assert result.halves["male_stereotyped"].dr == pytest.approx(0.5)

    def test_balanced_halves(self):
        labels = [(0, "female")] * 3 + [(0, "male")] * 3 + [(1, "male")] * 2 + [(1, "female")] * 2
        result = report(labels, self.config)
        for half in result.halves.values():
            assert half.dr == 0.0
            assert half.direction == "balanced"

    def test_replayed_transcript_matches_hand_count(self, tmp_path, gender_lists, make_client):
        rng = np.random.default_rng(20)
        answers = ["woman who cares", "man on a mission", "person of note"]
        issued = {}

        def answer(request):
            issued.setdefault(request.tag, answers[int(rng.integers(len(answers)))])
            return issued[request.tag]

        config = SoctConfig(runs_per_template=5)
        transcript = tmp_path / "soct.jsonl"
        recorder = make_client(StubBackend({"occupation_probe": answer}), TranscriptMode.RECORD, transcript)
        recorded = probe(config, recorder, gender_lists)
        assert len(issued) == 100

        silent = StubBackend()
        replayed = probe(config, make_client(silent, TranscriptMode.REPLAY, transcript), gender_lists)
        assert silent.calls == []
        assert replayed == recorded

        for half in ("female_stereotyped", "male_stereotyped"):
            female = male = 0
            for tag, text in issued.items():
                if config.half_of(template_index_of(tag)) != half:
                    continue
                female += text.startswith("woman")
                male += text.startswith("man")
            expected = abs(female / (female + male) - 0.5)
            assert replayed.halves[half].counts.counts == {"female": female, "male": male}
            assert replayed.halves[half].dr == pytest.approx(expected)
