# Stereotype Module
# Two-step explicit stereotype handling: LLM detection, LLM assessment of
# linguistic indicators, linear scoring and threshold filtering.

from pathlib import Path
from typing import Dict, Optional, Sequence

from loguru import logger
from pydantic import BaseModel, ValidationError, model_validator

from .config import DataPaths, PipelineDefaults, StereotypeConfig
from .exceptions import ConfigError
from .llm import LlmClient, parse_json_payload, structured_many
from .models import INDICATOR_VALUES, DetectionResult, IndicatorRecord, SentenceEntity, StereotypeSkipReason
from .prompts import PromptTemplate
from .repbias import Tokenizer, default_tokenizer

DETECTION_FIELDS = list(DetectionResult.model_fields)
ASSESSMENT_FIELDS = list(IndicatorRecord.model_fields)


class ScoreModel(BaseModel):
    """One-hot linear stereotype strength model with min-max scaling anchors"""

    version: str = "1"
    weights: Dict[str, Dict[str, float]]
    intercept: float = 0.0
    scale_min: float
    scale_max: float

    @model_validator(mode="after")
    def _check(self):
        if not self.scale_min < self.scale_max:
            raise ValueError("scale_min must be below scale_max")
        missing = [
            f"{indicator}={value}"
            for indicator, values in INDICATOR_VALUES.items()
            for value in values
            if value not in self.weights.get(indicator, {})
        ]
        if missing:
            raise ValueError(f"score model lacks weights for: {', '.join(missing)}")
        return self

    def raw(self, record: IndicatorRecord) -> float:
        return self.intercept + sum(
            self.weights[indicator][getattr(record, indicator)] for indicator in INDICATOR_VALUES
        )


def load_score_model(path=None) -> ScoreModel:
    path = Path(path or DataPaths.SCORE_MODEL)
    try:
        return ScoreModel.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read score model {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid score model {path}: {e}") from e


def score(record: IndicatorRecord, model: ScoreModel) -> float:
    """Min-max scaled stereotype strength in [0, 1]"""
    scaled = (model.raw(record) - model.scale_min) / (model.scale_max - model.scale_min)
    return min(1.0, max(0.0, scaled))


# Detection


def _parse_detection(text: str) -> DetectionResult:
    return DetectionResult.model_validate(parse_json_payload(text, DETECTION_FIELDS))


def _parse_assessment(text: str) -> IndicatorRecord:
    return IndicatorRecord.model_validate(parse_json_payload(text, ASSESSMENT_FIELDS))


def _reset_stage(entity: SentenceEntity):
    md = entity.metadata
    md.potential_stereotype = False
    md.detection = None
    md.detection_failed = None
    md.linguistic_indicators = None
    md.assessment_failed = None
    md.stereotype_skip_reason = None
    md.score_scsc = None
    md.remove_sentence = False


def _detectable(entity: SentenceEntity, config: StereotypeConfig, tokenizer: Tokenizer) -> bool:
    if not entity.metadata.relevant_sentence:
        return False
    if len(tokenizer.tokenize(entity.text)) > config.max_tokens:
        entity.metadata.stereotype_skip_reason = StereotypeSkipReason.TOO_LONG.value
        return False
    return True


def _apply_detection(entity: SentenceEntity, result):
    md = entity.metadata
    if isinstance(result, Exception):
        logger.warning(f"Detection failed for {entity.doc_id}#{entity.sent_id}, kept as non-stereotype: {result}")
        md.detection_failed = True
        md.potential_stereotype = False
        return None
    md.detection = result
    md.potential_stereotype = result.stereotype == "yes"
    return result


def _detection_request(client: LlmClient, sentence: str, context: str):
    return client.build_request(
        "stereotype_detection",
        PromptTemplate.stereotype_detection(sentence, context),
        temperature=PipelineDefaults.DETECTION_TEMPERATURE,
    )


def detect(
    entity: SentenceEntity,
    context: str,
    client: LlmClient,
    config: Optional[StereotypeConfig] = None,
    tokenizer: Optional[Tokenizer] = None,
) -> Optional[DetectionResult]:
    """Classify one sentence; returns None when the gate skips it or the payload fails"""
    config = config or StereotypeConfig()
    _reset_stage(entity)
    if not _detectable(entity, config, tokenizer or default_tokenizer()):
        return None
    result = structured_many(client, [_detection_request(client, entity.text, context)], _parse_detection)[0]
    return _apply_detection(entity, result)


def preceding_sentences(entities: Sequence[SentenceEntity]) -> Dict[tuple, str]:
    texts = {e.key: e.text for e in entities}
    return {e.key: texts.get((e.doc_id, e.sent_id - 1), "") for e in entities}


def detect_all(
    entities: Sequence[SentenceEntity],
    client: LlmClient,
    config: Optional[StereotypeConfig] = None,
    tokenizer: Optional[Tokenizer] = None,
) -> int:
    """Run detection over every relevant, short-enough sentence; returns the number flagged"""
    config = config or StereotypeConfig()
    tokenizer = tokenizer or default_tokenizer()
    contexts = preceding_sentences(entities)

    targets = []
    for entity in entities:
        _reset_stage(entity)
        if _detectable(entity, config, tokenizer):
            targets.append(entity)
    skipped = sum(1 for e in entities if e.metadata.stereotype_skip_reason)
    logger.info(f"Detecting stereotypes in {len(targets)} sentences ({skipped} skipped as too long)")

    requests = [_detection_request(client, e.text, contexts[e.key]) for e in targets]
    results = structured_many(client, requests, _parse_detection)
    for entity, result in zip(targets, results):
        _apply_detection(entity, result)

    flagged = sum(1 for e in entities if e.metadata.potential_stereotype)
    logger.info(f"{flagged} potential stereotypes flagged")
    return flagged


# Assessment


def _assessment_request(client: LlmClient, sentence: str):
    return client.build_request(
        "stereotype_assessment",
        PromptTemplate.stereotype_assessment(sentence),
        temperature=PipelineDefaults.DETECTION_TEMPERATURE,
    )


def _apply_assessment(entity: SentenceEntity, result):
    md = entity.metadata
    md.score_scsc = None
    md.remove_sentence = False
    if isinstance(result, Exception):
        logger.warning(f"Assessment failed for {entity.doc_id}#{entity.sent_id}, sentence kept: {result}")
        md.linguistic_indicators = None
        md.assessment_failed = True
        return None
    md.linguistic_indicators = result
    md.assessment_failed = None
    return result


def assess(entity: SentenceEntity, client: LlmClient) -> Optional[IndicatorRecord]:
    if not entity.metadata.potential_stereotype:
        return None
    result = structured_many(client, [_assessment_request(client, entity.text)], _parse_assessment)[0]
    return _apply_assessment(entity, result)


def assess_all(entities: Sequence[SentenceEntity], client: LlmClient) -> int:
    """Assess every flagged sentence; returns the number of successful assessments"""
    targets = [e for e in entities if e.metadata.potential_stereotype]
    results = structured_many(client, [_assessment_request(client, e.text) for e in targets], _parse_assessment)
    assessed = sum(1 for entity, result in zip(targets, results) if _apply_assessment(entity, result) is not None)
    logger.info(f"Assessed {assessed} of {len(targets)} potential stereotypes")
    return assessed


# Scoring and filtering


def score_all(entities: Sequence[SentenceEntity], model: ScoreModel) -> int:
    scored = 0
    for entity in entities:
        md = entity.metadata
        if md.potential_stereotype and md.linguistic_indicators is not None:
            md.score_scsc = score(md.linguistic_indicators, model)
            scored += 1
        else:
            md.score_scsc = None
    return scored


def filter_stereotypes(entities: Sequence[SentenceEntity], threshold: float) -> int:
    """Flag sentences whose score strictly exceeds the threshold; returns the count"""
    removed = 0
    for entity in entities:
        md = entity.metadata
        md.remove_sentence = md.score_scsc is not None and md.score_scsc > threshold
        removed += md.remove_sentence
    logger.info(f"{removed} sentences above stereotype threshold {threshold} flagged for removal")
    return removed

