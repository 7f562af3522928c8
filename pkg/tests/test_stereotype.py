"""
Tests for stereotype detection, indicator assessment, scoring and threshold filtering
"""

import json

import numpy as np
import pytest

from corpusbias.config import StereotypeConfig, TranscriptMode
from corpusbias.corpus import segment, segment_corpus
from corpusbias.exceptions import ConfigError
from corpusbias.prompts import DETECTION_EXAMPLES
from corpusbias.models import NA, DetectionResult, Document, IndicatorRecord
from corpusbias.repbias import Matcher, match_sentence
from corpusbias.stereotype import (
    assess_all,
    detect,
    detect_all,
    filter_stereotypes,
    load_score_model,
    score,
    score_all,
)

from conftest import (
    STRONG_INDICATORS,
    WEAK_INDICATORS,
    StubBackend,
    detection_answer,
    sentence_of,
)


def matched(corpus, lists):
    matcher = Matcher(lists)
    return [match_sentence(e, matcher) for e in segment_corpus(corpus)]


def stereotype_backend(assessment=STRONG_INDICATORS):
    return StubBackend(
        {
            "stereotype_detection": lambda r: detection_answer("always" in sentence_of(r)),
            "stereotype_assessment": lambda r: json.dumps(assessment),
        }
    )


class TestRecords:
    def test_detection_cascade_without_label(self):
        result = DetectionResult(has_category_label="no", stereotype="yes", beliefs_expectancies="yes")
        assert result.stereotype == "no"
        assert result.beliefs_expectancies == NA

    def test_indicator_synonyms(self):
        record = IndicatorRecord(
            has_category_label="Yes",
            target_type="Generic target",
            situation="Enduring characteristics",
            information="are lazy",
            situation_evaluation="negative",
            generalization="not applicable",
        )
        assert record.target_type == "generic"
        assert record.situation == "enduring"
        assert record.generalization == NA

    def test_indicator_cascade(self):
        no_info = IndicatorRecord(has_category_label="yes", information="N/A", situation="enduring",
                                  situation_evaluation="negative", generalization="abstract")
        assert no_info.situation == NA
        assert no_info.situation_evaluation == NA
        assert no_info.generalization == NA

        other = IndicatorRecord(has_category_label="yes", information="x", situation="other",
                                situation_evaluation="negative", generalization="abstract")
        assert other.situation_evaluation == NA
        assert other.generalization == NA

    def test_invalid_value_rejected(self):
        with pytest.raises(ValueError):
            IndicatorRecord(has_category_label="yes", connotation="furious")


class TestScore:
    def test_strong_and_weak(self):
        model = load_score_model()
        assert score(IndicatorRecord(**STRONG_INDICATORS), model) == pytest.approx(1.0)
        weak = score(IndicatorRecord(**WEAK_INDICATORS), model)
        assert weak == pytest.approx(0.18 / 0.85)
        assert weak < StereotypeConfig().threshold

    def test_range(self):
        model = load_score_model()
        no_label = IndicatorRecord(has_category_label="no")
        assert score(no_label, model) == 0.0

    @pytest.mark.parametrize(
        "indicator,value",
        [
            ("target_type", "generic"),
            ("connotation", "negative"),
            ("connotation", "neutral"),
            ("gram_form", "other"),
            ("ling_form", "subset"),
            ("ling_form", "generic"),
            ("situation", "enduring"),
            ("situation_evaluation", "negative"),
            ("generalization", "abstract"),
        ],
    )
    def test_single_indicator_change_moves_score_by_scaled_weight(self, indicator, value):
        model = load_score_model()
        base = IndicatorRecord(**WEAK_INDICATORS)
        changed = IndicatorRecord(**{**WEAK_INDICATORS, indicator: value})
        weights = model.weights[indicator]
        delta = (weights[value] - weights[getattr(base, indicator)]) / (model.scale_max - model.scale_min)
        assert score(changed, model) - score(base, model) == pytest.approx(delta)

    def test_shipped_weights_are_ordered(self):
        weights = load_score_model().weights
        assert weights["target_type"]["generic"] >= weights["target_type"]["specific"]
        ling = weights["ling_form"]
        assert ling["generic"] >= ling["subset"] >= ling["individual"]
        connotation = weights["connotation"]
        assert connotation["negative"] >= connotation["neutral"] >= connotation["positive"]
        evaluation = weights["situation_evaluation"]
        assert evaluation["negative"] >= evaluation["neutral"] >= evaluation["positive"]
        assert weights["situation"]["enduring"] >= weights["situation"]["situational"]
        assert weights["generalization"]["abstract"] >= weights["generalization"]["concrete"]

    def test_incomplete_model_rejected(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text(json.dumps({"weights": {"target_type": {"generic": 1}}, "scale_min": 0, "scale_max": 1}))
        with pytest.raises(ConfigError):
            load_score_model(path)


class TestDetection:
    def test_only_relevant_sentences_are_sent(self, gender_lists, tiny_corpus, make_client):
        entities = matched(tiny_corpus, gender_lists)
        backend = stereotype_backend()
        flagged = detect_all(entities, make_client(backend))
        relevant = [e for e in entities if e.metadata.relevant_sentence]
        assert len(backend.calls) == len(relevant)
        assert flagged == 1
        flagged_entity = next(e for e in entities if e.metadata.potential_stereotype)
        assert flagged_entity.text == "Women always drive badly."
        assert flagged_entity.metadata.detection.full_label == "women"

    def test_previous_sentence_is_context(self, gender_lists, make_client):
        doc = Document(doc_id="d", text="It was late. The king left.")
        entities = matched([doc], gender_lists)
        backend = stereotype_backend()
        detect_all(entities, make_client(backend))
        assert "Context: It was late.\nSentence: The king left." in backend.calls[0].messages[-1].content

    def test_detection_runs_at_temperature_zero(self, gender_lists, make_client):
        entities = matched([Document(doc_id="d", text="The king left.")], gender_lists)
        backend = stereotype_backend()
        detect_all(entities, make_client(backend))
        assert backend.calls[0].temperature == 0.0

    def test_long_sentence_skipped(self, gender_lists, make_client):
        text = "The king " + " ".join(["walked"] * 46) + "."
        entities = matched([Document(doc_id="d", text=text)], gender_lists)
        backend = stereotype_backend()
        detect_all(entities, make_client(backend))
        assert backend.calls == []
        assert entities[0].metadata.stereotype_skip_reason == "too_long"
        assert not entities[0].metadata.potential_stereotype

    def test_limit_is_inclusive(self, gender_lists, make_client):
        text = "The king " + " ".join(["walked"] * 45) + "."
        entities = matched([Document(doc_id="d", text=text)], gender_lists)
        backend = stereotype_backend()
        detect_all(entities, make_client(backend))
        assert len(backend.calls) == 1

    def test_unparseable_answer_keeps_sentence(self, gender_lists, make_client):
        entities = matched([Document(doc_id="d", text="Women always drive badly.")], gender_lists)
        backend = StubBackend({"stereotype_detection": lambda r: "I think so"})
        assert detect(entities[0], "", make_client(backend)) is None
        assert entities[0].metadata.detection_failed
        assert not entities[0].metadata.potential_stereotype
        assert backend.purposes() == ["stereotype_detection", "stereotype_detection:repair"]


class TestAssessmentAndFilter:
    def test_assess_only_flagged(self, gender_lists, tiny_corpus, make_client):
        entities = matched(tiny_corpus, gender_lists)
        backend = stereotype_backend()
        client = make_client(backend)
        detect_all(entities, client)
        assessed = assess_all(entities, client)
        assert assessed == 1
        assert backend.purposes().count("stereotype_assessment") == 1

    def test_end_to_end_removal(self, gender_lists, tiny_corpus, make_client):
        entities = matched(tiny_corpus, gender_lists)
        client = make_client(stereotype_backend())
        detect_all(entities, client)
        assess_all(entities, client)
        assert score_all(entities, load_score_model()) == 1
        assert filter_stereotypes(entities, 0.63) == 1
        removed = [e.text for e in entities if e.metadata.remove_sentence]
        assert removed == ["Women always drive badly."]

    def test_weak_stereotype_kept(self, gender_lists, tiny_corpus, make_client):
        entities = matched(tiny_corpus, gender_lists)
        client = make_client(stereotype_backend(WEAK_INDICATORS))
        detect_all(entities, client)
        assess_all(entities, client)
        score_all(entities, load_score_model())
        assert filter_stereotypes(entities, 0.63) == 0

    def test_assessment_failure_keeps_sentence(self, gender_lists, make_client):
        entities = matched([Document(doc_id="d", text="Women always drive badly.")], gender_lists)
        backend = StubBackend(
            {
                "stereotype_detection": lambda r: detection_answer(True),
                "stereotype_assessment": lambda r: '{"has_category_label": "yes"',
            }
        )
        client = make_client(backend)
        detect_all(entities, client)
        assert assess_all(entities, client) == 0
        score_all(entities, load_score_model())
        assert entities[0].metadata.assessment_failed
        assert entities[0].metadata.score_scsc is None
        assert filter_stereotypes(entities, 0.63) == 0

    @pytest.mark.parametrize("value,removed", [(0.63, False), (0.6301, True), (0.2, False)])
    def test_threshold_is_strict(self, value, removed):
        entity = segment(Document(doc_id="d", text="Women always drive badly."))[0]
        entity.metadata.potential_stereotype = True
        entity.metadata.score_scsc = value
        filter_stereotypes([entity], 0.63)
        assert entity.metadata.remove_sentence is removed


class TestReplayedExamples:
    def example_entities(self):
        entities = []
        for index, (context, sentence, _) in enumerate(DETECTION_EXAMPLES[:2]):
            entity = segment(Document(doc_id=f"ex{index}", text=f"{context} {sentence}"))[1]
            # the gate only lets matched sentences through
            entity.metadata.relevant_sentence = True
            entities.append((context, entity))
        return entities

    def test_recorded_answers_replay_without_backend(self, tmp_path, make_client):
        answers = {sentence: json.dumps(answer) for _, sentence, answer in DETECTION_EXAMPLES}
        transcript = tmp_path / "transcript.jsonl"
        recorder = make_client(
            StubBackend({"stereotype_detection": lambda r: answers[sentence_of(r)]}), TranscriptMode.RECORD, transcript
        )
        for context, entity in self.example_entities():
            detect(entity, context, recorder)

        silent = StubBackend()
        replayer = make_client(silent, TranscriptMode.REPLAY, transcript)
        (rain_context, rain), (emotional_context, emotional) = self.example_entities()
        assert detect(rain, rain_context, replayer).stereotype == "no"
        assert not rain.metadata.potential_stereotype
        result = detect(emotional, emotional_context, replayer)
        assert result.stereotype == "yes"
        assert result.full_label == "young women"
        assert emotional.metadata.potential_stereotype
        assert silent.calls == []


class TestThresholdFilter:
    # reported score fixtures; None means never assessed
    FIXTURES = [0.99, 0.63, 0.64, 0.6299, 0.71, 0.2, 0.0, 1.0, None]

    def scored(self, scores):
        entities = segment(Document(doc_id="d", text=" ".join(["Women drive badly."] * len(scores))))
        for entity, value in zip(entities, scores):
            entity.metadata.potential_stereotype = value is not None
            entity.metadata.score_scsc = value
        return entities

    def test_removes_exactly_fixtures_above_threshold(self):
        entities = self.scored(self.FIXTURES)
        assert filter_stereotypes(entities, 0.63) == 4
        removed = [e.metadata.score_scsc for e in entities if e.metadata.remove_sentence]
        assert removed == [v for v in self.FIXTURES if v is not None and v > 0.63]

    def test_higher_threshold_removes_a_subset(self):
        rng = np.random.default_rng(63)
        for _ in range(100):
            entities = self.scored([float(v) for v in rng.random(20)])
            low, high = sorted(float(t) for t in rng.random(2))
            filter_stereotypes(entities, low)
            removed_low = {e.sent_id for e in entities if e.metadata.remove_sentence}
            filter_stereotypes(entities, high)
            removed_high = {e.sent_id for e in entities if e.metadata.remove_sentence}
            assert removed_high <= removed_low
