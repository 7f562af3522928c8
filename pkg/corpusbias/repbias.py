# Representation Bias Module
# Tokenization, word-list matching, group-count aggregation, the DR score and
# cumulative-DR analysis over growing word-list lengths.

import json
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from .config import PipelineDefaults
from .corpus import default_abbreviations
from .models import AttributeSpec, DRReport, GroupCounts, SentenceEntity, WordList

_WORD = r"\w+(?:['’\-]\w+)*"


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int


@dataclass(frozen=True)
class WordMatch:
    """A word-list entry found in a text, with character offsets of the matched span"""

    group: str
    entry: str
    start: int
    end: int


class Tokenizer:
    """Lowercasing word tokenizer.

    Internal hyphens and apostrophes stay in-token; stop-list abbreviations keep
    their trailing period.
    """

    def __init__(self, abbreviations: Optional[FrozenSet[str]] = None):
        if abbreviations is None:
            abbreviations = default_abbreviations()
        alternatives = "|".join(re.escape(a) for a in sorted(abbreviations, key=len, reverse=True))
        if alternatives:
            pattern = rf"(?<![\w'’\-])(?:{alternatives})(?!\w)|{_WORD}"
        else:
            pattern = _WORD
        self._pattern = re.compile(pattern, re.IGNORECASE)

    def spans(self, text: str) -> List[Token]:
        return [
            Token(m.group(0).lower().replace("’", "'"), m.start(), m.end())
            for m in self._pattern.finditer(text)
        ]

    def tokenize(self, text: str) -> List[str]:
        return [token.text for token in self.spans(text)]


_default_tokenizer: Optional[Tokenizer] = None


def default_tokenizer() -> Tokenizer:
    global _default_tokenizer
    if _default_tokenizer is None:
        _default_tokenizer = Tokenizer()
    return _default_tokenizer


def tokenize(text: str) -> List[str]:
    return default_tokenizer().tokenize(text)


class Matcher:
    """Greedy longest-first matcher of word-list entries over token sequences"""

    def __init__(self, lists: Sequence[WordList], tokenizer: Optional[Tokenizer] = None):
        attributes = {wl.attribute for wl in lists}
        if len(attributes) > 1:
            raise ValueError(f"word lists mix attributes: {sorted(attributes)}")
        self.tokenizer = tokenizer or default_tokenizer()
        self.groups = [wl.group for wl in lists]
        self._phrases: Dict[Tuple[str, ...], Tuple[str, str]] = {}
        for wl in lists:
            for entry in wl.entries:
                key = tuple(self.tokenizer.tokenize(entry))
                if not key:
                    continue
                if key in self._phrases and self._phrases[key][0] != wl.group:
                    logger.warning(
                        f"Entry {entry!r} appears in groups {self._phrases[key][0]!r} and {wl.group!r}; "
                        f"keeping {self._phrases[key][0]!r}"
                    )
                    continue
                self._phrases.setdefault(key, (wl.group, entry))
        self._max_len = max((len(k) for k in self._phrases), default=0)

    def find(self, text: str) -> List[WordMatch]:
        tokens = self.tokenizer.spans(text)
        words = [t.text for t in tokens]
        found = []
        i = 0
        while i < len(tokens):
            for length in range(min(self._max_len, len(tokens) - i), 0, -1):
                hit = self._phrases.get(tuple(words[i : i + length]))
                if hit is not None:
                    found.append(WordMatch(hit[0], hit[1], tokens[i].start, tokens[i + length - 1].end))
                    i += length
                    break
            else:
                i += 1
        return found

    def group_words(self, text: str) -> Dict[str, List[str]]:
        words = {group: [] for group in self.groups}
        for match in self.find(text):
            words[match.group].append(match.entry)
        return words

    def count(self, text: str) -> Dict[str, int]:
        return {group: len(words) for group, words in self.group_words(text).items()}


def match_sentence(entity: SentenceEntity, matcher: Matcher) -> SentenceEntity:
    """Fill the match-stage metadata of one entity (idempotent)"""
    words = matcher.group_words(entity.text)
    entity.metadata.words_per_group = words
    entity.metadata.counts_per_group = {group: len(found) for group, found in words.items()}
    entity.metadata.relevant_sentence = any(entity.metadata.counts_per_group.values())
    return entity


def aggregate_counts(
    entities: Iterable[SentenceEntity],
    spec: AttributeSpec,
    after_mitigation: bool = False,
) -> GroupCounts:
    """Sum per-sentence group counts.

    With after_mitigation, removed sentences are skipped and substituted
    sentences contribute the counts of their counterfactual text.
    """
    totals = {group: 0 for group in spec.groups}
    relevant = 0
    for entity in entities:
        md = entity.metadata
        if after_mitigation and md.remove_sentence:
            continue
        counts = md.counts_per_group
        if after_mitigation and md.text_cda is not None and md.counts_per_group_cda is not None:
            counts = md.counts_per_group_cda
        for group, value in counts.items():
            totals[group] = totals.get(group, 0) + value
        if any(counts.values()):
            relevant += 1
    return GroupCounts(attribute=spec.attribute, counts=totals, relevant_sentences=relevant)


CountsLike = Union[GroupCounts, Mapping[str, int]]


def _count_map(counts: CountsLike) -> Mapping[str, int]:
    return counts.counts if isinstance(counts, GroupCounts) else counts


def _expected_vector(groups: Sequence[str], expected: Optional[Mapping[str, float]]) -> np.ndarray:
    if expected is None:
        return np.full(len(groups), 1.0 / len(groups))
    return np.array([expected[g] for g in groups], dtype=float)


def dr_max(counts: CountsLike, expected: Optional[Mapping[str, float]] = None) -> float:
    groups = list(_count_map(counts))
    return float(1.0 - _expected_vector(groups, expected).min())


def compute_dr(counts: CountsLike, expected: Optional[Mapping[str, float]] = None) -> float:
    """Total variation distance between observed group shares and the expected
    distribution (uniform unless population rates are given).

    All-zero counts return the upper bound.
    """
    mapping = _count_map(counts)
    groups = list(mapping)
    observed = np.array([mapping[g] for g in groups], dtype=float)
    target = _expected_vector(groups, expected)
    total = observed.sum()
    if total == 0:
        return float(1.0 - target.min())
    return float(0.5 * np.abs(observed / total - target).sum())


def majority_minority(counts: CountsLike) -> Tuple[str, str]:
    mapping = _count_map(counts)
    majority = min(mapping, key=lambda g: (-mapping[g], g))
    minority = min(mapping, key=lambda g: (mapping[g], g))
    return majority, minority


def _ranked(words: Sequence[str], freqs: Mapping[str, int]) -> List[str]:
    return sorted(words, key=lambda w: (-freqs.get(w, 0), w))


def cumulative_dr(
    lists: Sequence[WordList],
    freqs: Mapping[str, int],
    expected: Optional[Mapping[str, float]] = None,
) -> pd.DataFrame:
    """DR over the top-i most frequent words of every group, for i = 1..longest list.

    Groups shorter than i contribute their full list.
    """
    if not lists:
        return pd.DataFrame(columns=["list_length", "dr"])
    length = max(len(wl.entries) for wl in lists)
    if length == 0:
        return pd.DataFrame(columns=["list_length", "dr"])

    matrix = np.zeros((len(lists), length))
    for row, wl in enumerate(lists):
        ranked = np.array([freqs.get(w, 0) for w in _ranked(wl.entries, freqs)], dtype=float)
        running = np.cumsum(ranked) if len(ranked) else np.zeros(1)
        matrix[row, : len(running)] = running
        matrix[row, len(running) :] = running[-1]

    target = _expected_vector([wl.group for wl in lists], expected)[:, None]
    totals = matrix.sum(axis=0)
    safe = np.where(totals == 0, 1.0, totals)
    dr = 0.5 * np.abs(matrix / safe - target).sum(axis=0)
    dr = np.where(totals == 0, 1.0 - target.min(), dr)
    return pd.DataFrame({"list_length": np.arange(1, length + 1), "dr": dr})


def truncate_to_shortest(lists: Sequence[WordList], freqs: Mapping[str, int]) -> List[WordList]:
    """Keep the k most frequent words of every group, k being the shortest list length"""
    if not lists:
        return []
    k = min(len(wl.entries) for wl in lists)
    truncated = []
    for wl in lists:
        kept = _ranked(wl.entries, freqs)[:k]
        counterpart = {w: c for w, c in wl.counterpart.items() if w in kept}
        truncated.append(wl.model_copy(update={"entries": kept, "counterpart": counterpart}))
    return truncated


def convergence_length(
    series: pd.DataFrame, tol: float = PipelineDefaults.CONVERGENCE_TOLERANCE
) -> Optional[int]:
    """First list length after which every successive DR change stays below tol"""
    values = series["dr"].to_numpy(dtype=float)
    if len(values) < 2:
        return None
    deltas = np.abs(np.diff(values))
    if deltas[-1] >= tol:
        return None
    above = np.nonzero(deltas >= tol)[0]
    start = 0 if len(above) == 0 else int(above[-1]) + 1
    return int(series["list_length"].iloc[start])


def emit_report(
    entities: Sequence[SentenceEntity],
    spec: AttributeSpec,
    expected: Optional[Mapping[str, float]] = None,
    after_mitigation: bool = False,
) -> DRReport:
    """Build the representation-bias report from matched entities"""
    counts = aggregate_counts(entities, spec, after_mitigation=after_mitigation)
    per_doc_counts: Dict[str, Dict[str, int]] = defaultdict(lambda: {g: 0 for g in spec.groups})
    for entity in entities:
        md = entity.metadata
        if after_mitigation and md.remove_sentence:
            continue
        sentence_counts = md.counts_per_group
        if after_mitigation and md.text_cda is not None and md.counts_per_group_cda is not None:
            sentence_counts = md.counts_per_group_cda
        if any(sentence_counts.values()):
            doc = per_doc_counts[entity.doc_id]
            for group, value in sentence_counts.items():
                doc[group] += value

    majority, minority = majority_minority(counts)
    report = DRReport(
        attribute=spec.attribute,
        counts=counts,
        dr=compute_dr(counts, expected),
        dr_max=dr_max(counts, expected),
        majority_group=majority,
        minority_group=minority,
        no_observations=counts.total == 0,
        expected=dict(expected) if expected is not None else None,
        per_document={doc_id: compute_dr(c, expected) for doc_id, c in sorted(per_doc_counts.items())},
    )
    if report.no_observations:
        logger.warning(f"No {spec.attribute} word-list occurrences found; DR set to its upper bound")
    return report


def write_report(report: DRReport, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.model_dump(exclude_none=True), indent=2, sort_keys=True) + "\n", encoding="utf-8")
