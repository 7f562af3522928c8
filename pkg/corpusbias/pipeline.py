# Pipeline Module
# Stage orchestration over the metadata store: segment, match, stereotype
# detection/assessment/filtering, CDA, corpus rebuild and final reports.

import json
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import pandas as pd
from loguru import logger
from pydantic import BaseModel, Field

from .cda import CdaReport, load_precheck_lists, run_cda
from .config import CdaMode, PipelineConfig, TranscriptMode
from .corpus import MetadataStore, build_debiased, load_abbreviations, load_corpus, segment_corpus, write_corpus
from .exceptions import ConfigError, CorpusBiasError
from .llm import Backend, LlmClient, Transcript
from .models import AttributeSpec, MetadataRecord, SentenceEntity, WordList
from .repbias import (
    Matcher,
    Tokenizer,
    aggregate_counts,
    compute_dr,
    convergence_length,
    cumulative_dr,
    emit_report,
    match_sentence,
    write_report,
)
from .stereotype import assess_all, detect_all, filter_stereotypes, load_score_model, score_all
from .wordlist import compute_frequencies, load_wordlists

STAGES = ("segment", "match", "detect", "assess", "score_filter", "cda", "build", "report")

# Metadata fields each stage may write
FIELD_OWNERS: Dict[str, frozenset] = {
    "segment": frozenset(),
    "match": frozenset({"words_per_group", "counts_per_group", "relevant_sentence"}),
    "detect": frozenset({"potential_stereotype", "detection", "detection_failed", "stereotype_skip_reason"}),
    "assess": frozenset({"linguistic_indicators", "assessment_failed"}),
    "score_filter": frozenset({"score_scsc", "remove_sentence"}),
    "cda": frozenset({"text_cda", "counts_per_group_cda", "skip_reason"}),
    "build": frozenset(),
    "report": frozenset(),
}


def clear_stage_fields(entities: Sequence[SentenceEntity], stages: Sequence[str]):
    """Reset the metadata fields owned by `stages` to their defaults"""
    fields = sorted(set().union(*(FIELD_OWNERS[s] for s in stages))) if stages else []
    for entity in entities:
        for name in fields:
            setattr(entity.metadata, name, MetadataRecord.model_fields[name].get_default(call_default_factory=True))


class Artifacts:
    TRANSCRIPT = "transcript.jsonl"
    BIAS_BEFORE = "bias_report_before.json"
    BIAS_AFTER = "bias_report_after.json"
    CUMULATIVE_DR = "cumulative_dr.csv"
    CDA_REPORT = "cda_report.json"
    DEBIASED = "debiased.jsonl"
    SUMMARY_JSON = "summary.json"
    SUMMARY_TXT = "summary.txt"
    MANIFEST = "manifest.json"


class RunSummary(BaseModel):
    """Run overview: relevant sentences, group occurrences, DR, filtered stereotypes, modified sentences"""

    attribute: str
    sentences: int = 0
    relevant_sentences: int = 0
    counts_before: Dict[str, int] = Field(default_factory=dict)
    dr_before: float = 0.0
    potential_stereotypes: int = 0
    detection_failed: int = 0
    assessment_failed: int = 0
    too_long: int = 0
    filtered_stereotypes: int = 0
    modified_sentences: int = 0
    skip_reasons: Dict[str, int] = Field(default_factory=dict)
    counts_after: Dict[str, int] = Field(default_factory=dict)
    dr_after: float = 0.0
    no_observations: bool = True

    def table(self) -> pd.DataFrame:
        row = {"Relevant sentences": self.relevant_sentences}
        row.update({f"Occurrences {group}": n for group, n in self.counts_before.items()})
        row.update(
            {
                "DR": round(self.dr_before, 4),
                "Filtered stereotypes": self.filtered_stereotypes,
                "Modified sentences": self.modified_sentences,
                "DR after CDA": round(self.dr_after, 4),
            }
        )
        return pd.DataFrame([row], index=[self.attribute])


def report_summary(
    entities: Sequence[SentenceEntity], spec: AttributeSpec, expected: Optional[Dict[str, float]] = None
) -> RunSummary:
    """Summarize a metadata store; an empty store gives zero counts"""
    before = aggregate_counts(entities, spec)
    after = aggregate_counts(entities, spec, after_mitigation=True)
    skips: Dict[str, int] = {}
    summary = RunSummary(
        attribute=spec.attribute,
        sentences=len(entities),
        relevant_sentences=before.relevant_sentences,
        counts_before=before.counts,
        dr_before=compute_dr(before, expected),
        counts_after=after.counts,
        dr_after=compute_dr(after, expected),
        no_observations=before.total == 0,
    )
    for entity in entities:
        md = entity.metadata
        summary.potential_stereotypes += md.potential_stereotype
        summary.detection_failed += bool(md.detection_failed)
        summary.assessment_failed += bool(md.assessment_failed)
        summary.too_long += md.stereotype_skip_reason is not None
        summary.filtered_stereotypes += md.remove_sentence
        summary.modified_sentences += md.text_cda is not None
        if md.skip_reason is not None:
            skips[md.skip_reason] = skips.get(md.skip_reason, 0) + 1
    summary.skip_reasons = dict(sorted(skips.items()))
    return summary


def _write_json(path: Path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


class Pipeline:
    """Runs the stages in order, checkpointing the metadata store after each one"""

    def __init__(self, config: PipelineConfig, backend: Optional[Backend] = None):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.store = MetadataStore(self.output_dir, in_memory=config.in_memory)
        transcript_path = config.transcript.path or self.output_dir / Artifacts.TRANSCRIPT
        self.transcript = Transcript(transcript_path, config.transcript.mode)
        self.backend = backend
        self.timings: Dict[str, float] = {}
        self._clients: Dict[str, LlmClient] = {}
        self._wordlists: Optional[List[WordList]] = None
        self._tokenizer: Optional[Tokenizer] = None

    # Shared resources

    def client(self, endpoint: str) -> LlmClient:
        if endpoint not in self._clients:
            self._clients[endpoint] = LlmClient(getattr(self.config.endpoints, endpoint), self.transcript, self.backend)
        return self._clients[endpoint]

    @property
    def tokenizer(self) -> Tokenizer:
        if self._tokenizer is None:
            self._tokenizer = Tokenizer(load_abbreviations(self.config.abbreviations_path))
        return self._tokenizer

    @property
    def wordlists(self) -> List[WordList]:
        if self._wordlists is None:
            self._wordlists = load_wordlists(self.config.wordlist_dir, self.config.attribute)
        return self._wordlists

    def matcher(self) -> Matcher:
        return Matcher(self.wordlists, self.tokenizer)

    @property
    def expected(self) -> Optional[Dict[str, float]]:
        return self.config.population_rates

    # Stages

    def _stage_segment(self, entities: List[SentenceEntity]) -> List[SentenceEntity]:
        documents = load_corpus(self.config.corpus)
        return segment_corpus(documents, load_abbreviations(self.config.abbreviations_path), self.config.workers)

    def _stage_match(self, entities: List[SentenceEntity]) -> List[SentenceEntity]:
        matcher = self.matcher()
        for entity in entities:
            match_sentence(entity, matcher)
        report = emit_report(entities, self.config.attribute, self.expected)
        write_report(report, self.output_dir / Artifacts.BIAS_BEFORE)
        logger.info(f"DR before mitigation: {report.dr:.4f} ({report.majority_group} over {report.minority_group})")

        words = [word for wl in self.wordlists for word in wl.entries]
        freqs = compute_frequencies(words, load_corpus(self.config.corpus), self.tokenizer)
        series = cumulative_dr(self.wordlists, freqs, self.expected)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        series.to_csv(self.output_dir / Artifacts.CUMULATIVE_DR, index=False, float_format="%.10f")
        length = convergence_length(series) if len(series) else None
        if length is not None:
            logger.info(f"Cumulative DR converges at list length {length}")
        return entities

    def _stage_detect(self, entities: List[SentenceEntity]) -> List[SentenceEntity]:
        detect_all(entities, self.client("detection"), self.config.stereotype, self.tokenizer)
        return entities

    def _stage_assess(self, entities: List[SentenceEntity]) -> List[SentenceEntity]:
        assess_all(entities, self.client("assessment"))
        return entities

    def _stage_score_filter(self, entities: List[SentenceEntity]) -> List[SentenceEntity]:
        score_all(entities, load_score_model(self.config.stereotype.score_model_path))
        filter_stereotypes(entities, self.config.stereotype.threshold)
        return entities

    def _stage_cda(self, entities: List[SentenceEntity]) -> List[SentenceEntity]:
        gc = self.config.cda.mode == CdaMode.GC
        report: CdaReport = run_cda(
            entities,
            self.config.attribute,
            self.wordlists,
            self.config.cda,
            precheck_lists=load_precheck_lists(self.config.precheck.political, self.config.precheck.historical),
            selector=self.client("selection") if gc else None,
            verifier=self.client("verification") if gc else None,
            matcher=self.matcher(),
            expected=self.expected,
        )
        _write_json(self.output_dir / Artifacts.CDA_REPORT, report.model_dump(mode="json", exclude_none=True))
        return entities

    def _stage_build(self, entities: List[SentenceEntity]) -> List[SentenceEntity]:
        debiased = build_debiased(entities, load_corpus(self.config.corpus))
        self.output_dir.mkdir(parents=True, exist_ok=True)
        write_corpus(debiased, self.output_dir / Artifacts.DEBIASED)
        return entities

    def _stage_report(self, entities: List[SentenceEntity]) -> List[SentenceEntity]:
        after = emit_report(entities, self.config.attribute, self.expected, after_mitigation=True)
        write_report(after, self.output_dir / Artifacts.BIAS_AFTER)
        summary = report_summary(entities, self.config.attribute, self.expected)
        _write_json(self.output_dir / Artifacts.SUMMARY_JSON, summary.model_dump(mode="json"))
        (self.output_dir / Artifacts.SUMMARY_TXT).write_text(summary.table().to_string() + "\n", encoding="utf-8")
        logger.info(f"DR {summary.dr_before:.4f} -> {summary.dr_after:.4f}")
        return entities

    # Orchestration

    def _stage_fn(self, stage: str) -> Callable[[List[SentenceEntity]], List[SentenceEntity]]:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
        return getattr(self, f"_stage_{stage}")

    def run_stage(self, stage: str, entities: Optional[List[SentenceEntity]] = None) -> List[SentenceEntity]:
        """Run one stage on the stored entities and checkpoint the result.

        Every earlier stage must already be stamped. Stamps of later stages are
        discarded and the metadata fields owned by this and later stages are
        reset before the stage runs.
        """
        fn = self._stage_fn(stage)
        position = STAGES.index(stage)
        completed = self.store.completed_stages()
        missing = [s for s in STAGES[:position] if s not in completed]
        if missing:
            raise ConfigError(f"stage {stage!r} needs completed stages first: {', '.join(missing)}")
        if entities is None:
            entities = self.store.read()

        self.store.reset_after(STAGES[position - 1] if position else None)
        clear_stage_fields(entities, STAGES[position:])
        started = time.perf_counter()
        try:
            entities = fn(entities)
        except CorpusBiasError:
            logger.error(f"Stage {stage} failed; metadata store kept at the last completed stage")
            raise
        self.timings[stage] = round(time.perf_counter() - started, 3)
        self.store.write(entities)
        self.store.stamp(stage)
        logger.info(f"Stage {stage} done in {self.timings[stage]:.2f}s")
        return entities

    def run(self, resume: bool = False, until: Optional[str] = None) -> RunSummary:
        """Run every stage (or up to `until`); with resume, stamped stages are skipped"""
        if until is not None:
            self._stage_fn(until)
        if not resume:
            self.store.reset_after(None)
        completed = self.store.completed_stages()
        entities = self.store.read() if completed else []

        for stage in STAGES:
            if stage in completed:
                logger.info(f"Stage {stage} already completed, skipping")
            else:
                entities = self.run_stage(stage, entities)
            if stage == until:
                break

        self.write_manifest()
        return report_summary(entities, self.config.attribute, self.expected)

    def write_manifest(self):
        self.output_dir.mkdir(parents=True, exist_ok=True)
        artifacts = sorted(
            p.name for p in self.output_dir.iterdir() if p.is_file() and p.name != Artifacts.MANIFEST
        )
        _write_json(
            self.output_dir / Artifacts.MANIFEST,
            {
                "created": datetime.now(timezone.utc).isoformat(),
                "stages": self.store.completed_stages(),
                "timings": self.timings,
                "seed": self.config.cda.rng_seed,
                "cda_mode": CdaMode(self.config.cda.mode).value,
                "transcript_mode": TranscriptMode(self.config.transcript.mode).value,
                "artifacts": artifacts,
            },
        )


def run_pipeline(config: PipelineConfig, backend: Optional[Backend] = None, resume: bool = False) -> RunSummary:
    return Pipeline(config, backend).run(resume=resume)
