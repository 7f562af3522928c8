# Domain Models
# Pydantic records shared by every pipeline stage: documents, sentence
# entities and their metadata, word lists, group counts and DR reports.

from enum import Enum
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

NA = "not-applicable"

YesNo = Literal["yes", "no"]
YesNoNA = Literal["yes", "no", "not-applicable"]


class SkipReason(str, Enum):
    POLITICAL = "political"
    HISTORICAL = "historical"
    YEAR = "year"
    NOT_RELEVANT = "not_relevant"
    FLAGGED_REMOVED = "flagged_removed"


class StereotypeSkipReason(str, Enum):
    TOO_LONG = "too_long"


class Document(BaseModel):
    doc_id: str = Field(min_length=1)
    text: str = ""


# Answer synonyms the models produce for the indicator scheme
_SYNONYMS = {
    "generic target": "generic",
    "specific target": "specific",
    "enduring characteristics": "enduring",
    "enduring characteristic": "enduring",
    "situational behaviour": "situational",
    "situational behavior": "situational",
    "not applicable": NA,
    "not_applicable": NA,
    "n/a": NA,
    "na": NA,
}


def _normalize_answer(value: Any) -> Any:
    if not isinstance(value, str):
        return value
    cleaned = value.strip().strip(".").strip().lower()
    return _SYNONYMS.get(cleaned, cleaned)


class DetectionResult(BaseModel):
    """Answers of the binary stereotype detection step"""

    has_category_label: YesNo
    full_label: str = NA
    beliefs_expectancies: YesNoNA = NA
    information: str = NA
    behavior_features_traits: YesNoNA = NA
    stereotype: YesNo

    @field_validator("has_category_label", "beliefs_expectancies", "behavior_features_traits", "stereotype", mode="before")
    @classmethod
    def _normalize(cls, value):
        return _normalize_answer(value)

    @model_validator(mode="after")
    def _cascade(self):
        if self.has_category_label == "no":
            self.full_label = NA
            self.beliefs_expectancies = NA
            self.information = NA
            self.behavior_features_traits = NA
            self.stereotype = "no"
        return self


class IndicatorRecord(BaseModel):
    """Linguistic indicators of a potential stereotype"""

    has_category_label: YesNo
    full_label: str = NA
    target_type: Literal["specific", "generic", "not-applicable"] = NA
    connotation: Literal["negative", "neutral", "positive", "not-applicable"] = NA
    gram_form: Literal["noun", "other", "not-applicable"] = NA
    ling_form: Literal["generic", "subset", "individual", "not-applicable"] = NA
    information: str = NA
    situation: Literal["situational", "enduring", "other", "not-applicable"] = NA
    situation_evaluation: Literal["negative", "neutral", "positive", "not-applicable"] = NA
    generalization: Literal["abstract", "concrete", "not-applicable"] = NA

    @field_validator(
        "has_category_label",
        "target_type",
        "connotation",
        "gram_form",
        "ling_form",
        "situation",
        "situation_evaluation",
        "generalization",
        mode="before",
    )
    @classmethod
    def _normalize(cls, value):
        return _normalize_answer(value)

    @field_validator("information", "full_label", mode="before")
    @classmethod
    def _normalize_text(cls, value):
        if isinstance(value, str) and _normalize_answer(value) == NA:
            return NA
        return value

    @model_validator(mode="after")
    def _cascade(self):
        if self.has_category_label == "no":
            for name in CATEGORICAL_INDICATORS:
                setattr(self, name, NA)
            self.full_label = NA
            self.information = NA
            return self
        if self.information == NA:
            self.situation = NA
        if self.situation in ("other", NA):
            self.situation_evaluation = NA
            self.generalization = NA
        return self


# Indicators that carry a one-hot weight in the score model
CATEGORICAL_INDICATORS = (
    "target_type",
    "connotation",
    "gram_form",
    "ling_form",
    "situation",
    "situation_evaluation",
    "generalization",
)

INDICATOR_VALUES: Dict[str, List[str]] = {
    "has_category_label": ["yes", "no"],
    "target_type": ["specific", "generic", NA],
    "connotation": ["negative", "neutral", "positive", NA],
    "gram_form": ["noun", "other", NA],
    "ling_form": ["generic", "subset", "individual", NA],
    "situation": ["situational", "enduring", "other", NA],
    "situation_evaluation": ["negative", "neutral", "positive", NA],
    "generalization": ["abstract", "concrete", NA],
}


class MetadataRecord(BaseModel):
    """The per-sentence ledger every stage enriches"""

    model_config = ConfigDict(use_enum_values=True)

    # match stage
    words_per_group: Dict[str, List[str]] = Field(default_factory=dict)
    counts_per_group: Dict[str, int] = Field(default_factory=dict)
    relevant_sentence: bool = False
    # stereotype stage
    potential_stereotype: bool = False
    detection: Optional[DetectionResult] = None
    detection_failed: Optional[bool] = None
    linguistic_indicators: Optional[IndicatorRecord] = None
    assessment_failed: Optional[bool] = None
    stereotype_skip_reason: Optional[StereotypeSkipReason] = None
    score_scsc: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    remove_sentence: bool = False
    # cda stage
    text_cda: Optional[str] = None
    counts_per_group_cda: Optional[Dict[str, int]] = None
    skip_reason: Optional[SkipReason] = None

    @model_validator(mode="after")
    def _check_consistency(self):
        for group, words in self.words_per_group.items():
            if self.counts_per_group.get(group, 0) != len(words):
                raise ValueError(f"counts_per_group[{group!r}] does not match words_per_group")
        if self.score_scsc is not None and not self.potential_stereotype:
            raise ValueError("score_scsc requires potential_stereotype")
        if self.text_cda is not None and self.remove_sentence:
            raise ValueError("text_cda and remove_sentence are mutually exclusive")
        return self


class SentenceEntity(BaseModel):
    doc_id: str
    sent_id: int = Field(ge=0)
    char_start: int = Field(ge=0)
    char_end: int = Field(ge=0)
    text: str
    metadata: MetadataRecord = Field(default_factory=MetadataRecord)

    @property
    def key(self):
        return (self.doc_id, self.sent_id)

    def to_json_line(self) -> str:
        return self.model_dump_json(exclude_none=True)


class AttributeSpec(BaseModel):
    attribute: str = Field(min_length=1)
    groups: List[str]

    @field_validator("groups")
    @classmethod
    def _check_groups(cls, groups):
        if len(groups) < 2:
            raise ValueError("an attribute needs at least two groups")
        if any(not g for g in groups):
            raise ValueError("group names must be non-empty")
        if len(set(groups)) != len(groups):
            raise ValueError("group names must be unique")
        return groups

    @property
    def size(self) -> int:
        return len(self.groups)


class WordList(BaseModel):
    attribute: str
    group: str
    entries: List[str] = Field(default_factory=list)
    counterpart: Dict[str, str] = Field(default_factory=dict)
    # group the counterpart values point into
    counterpart_group: Optional[str] = None

    @field_validator("entries")
    @classmethod
    def _check_entries(cls, entries):
        if any(not e for e in entries):
            raise ValueError("word list entries must be non-empty")
        if len(set(entries)) != len(entries):
            raise ValueError("word list entries must be unique")
        return entries


class SelectionMode(str, Enum):
    FREQUENCY = "frequency"
    GENERATION = "generation"


class GenerationParams(BaseModel):
    runs: int = Field(default=5, ge=1)
    words_per_run: int = Field(default=300, ge=1)
    validation_count: int = Field(default=100, ge=1)
    selection_mode: SelectionMode = SelectionMode.FREQUENCY
    few_shots: Dict[str, Dict[str, List[str]]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_k(self):
        if self.validation_count > self.runs * self.words_per_run:
            raise ValueError("validation_count cannot exceed runs * words_per_run")
        return self


class GroupCounts(BaseModel):
    attribute: str
    counts: Dict[str, int]
    relevant_sentences: int = Field(default=0, ge=0)

    @field_validator("counts")
    @classmethod
    def _non_negative(cls, counts):
        if any(v < 0 for v in counts.values()):
            raise ValueError("group counts must be non-negative")
        return counts

    @classmethod
    def empty(cls, spec: AttributeSpec) -> "GroupCounts":
        return cls(attribute=spec.attribute, counts={g: 0 for g in spec.groups})

    def merge(self, other: "GroupCounts") -> "GroupCounts":
        counts = dict(self.counts)
        for group, value in other.counts.items():
            counts[group] = counts.get(group, 0) + value
        return GroupCounts(
            attribute=self.attribute,
            counts=counts,
            relevant_sentences=self.relevant_sentences + other.relevant_sentences,
        )

    @property
    def total(self) -> int:
        return sum(self.counts.values())


class DRReport(BaseModel):
    attribute: str
    counts: GroupCounts
    dr: float
    dr_max: float
    majority_group: str
    minority_group: str
    no_observations: bool = False
    expected: Optional[Dict[str, float]] = None
    per_document: Dict[str, float] = Field(default_factory=dict)
