# Counterfactual Data Augmentation Module
# BaseCDA (probabilistic one-sided substitution) and GC-CDA (prechecked,
# DR-targeted, LLM-assisted and verified substitution).

import math
import re
from collections import Counter
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field
from tqdm import tqdm

from .config import CdaConfig, CdaMode, DataPaths, settings
from .exceptions import ConfigError, LlmRequestError
from .llm import LlmClient
from .models import AttributeSpec, GroupCounts, SentenceEntity, SkipReason, WordList
from .prompts import PromptTemplate
from .repbias import Matcher, Tokenizer, WordMatch, aggregate_counts, compute_dr, default_tokenizer, majority_minority

YEAR_PATTERN = r"(?<!\d)(?:1[0-9]{3}|20[0-2][0-9])(?!\d)"

# Tokens after 'her'/'his' that signal object or standalone use rather than a
# following noun
NON_NOUN_CUES = frozenset(
    """
    a an the this that these those some any every each no
    to in on at by for with from of about into onto over under after before
    through during without within against among between up down out off around
    and or but nor so yet if when while because as than then
    i you he she it we they me him her us them my your his its our their
    is am are was were be been being has have had do does did will would can could
    shall should may might must
    yesterday today tomorrow tonight now here there again too also already always
    never often still just very really well again once twice
    """.split()
)


class PrecheckLists(BaseModel):
    political_keywords: List[str] = Field(default_factory=list)
    historical_keywords: List[str] = Field(default_factory=list)
    year_pattern: str = YEAR_PATTERN


def _read_keywords(path) -> List[str]:
    words = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip().lower()
        if line and not line.startswith("#"):
            words.append(line)
    return words


def load_precheck_lists(political_path=None, historical_path=None) -> PrecheckLists:
    return PrecheckLists(
        political_keywords=_read_keywords(political_path or DataPaths.POLITICAL_KEYWORDS),
        historical_keywords=_read_keywords(historical_path or DataPaths.HISTORICAL_KEYWORDS),
    )


class _KeywordIndex:
    """Token-sequence keyword lookup for the precheck"""

    def __init__(self, lists: PrecheckLists, tokenizer: Tokenizer):
        self.tokenizer = tokenizer
        self.political = {tuple(tokenizer.tokenize(k)) for k in lists.political_keywords}
        self.historical = {tuple(tokenizer.tokenize(k)) for k in lists.historical_keywords}
        self.lengths = sorted({len(k) for k in self.political | self.historical if k})
        self.year = re.compile(lists.year_pattern)

    def hits(self, text: str, keywords) -> bool:
        tokens = self.tokenizer.tokenize(text)
        for n in self.lengths:
            for i in range(len(tokens) - n + 1):
                if tuple(tokens[i : i + n]) in keywords:
                    return True
        return False


def precheck(
    entity: SentenceEntity,
    mode: CdaMode,
    lists: Optional[PrecheckLists] = None,
    tokenizer: Optional[Tokenizer] = None,
    index: Optional[_KeywordIndex] = None,
) -> Optional[str]:
    """Return the skip reason for an entity (recorded in its metadata), or None if it may be rewritten"""
    md = entity.metadata
    reason = None
    if not md.relevant_sentence:
        reason = SkipReason.NOT_RELEVANT
    elif md.remove_sentence:
        reason = SkipReason.FLAGGED_REMOVED
    elif CdaMode(mode) == CdaMode.GC:
        index = index or _KeywordIndex(lists or load_precheck_lists(), tokenizer or default_tokenizer())
        if index.hits(entity.text, index.political):
            reason = SkipReason.POLITICAL
        elif index.hits(entity.text, index.historical):
            reason = SkipReason.HISTORICAL
        elif index.year.search(entity.text):
            reason = SkipReason.YEAR
    md.skip_reason = reason.value if reason else None
    return md.skip_reason


class SubstitutionPlan(BaseModel):
    """Occurrences to move away from over-represented groups and toward the others"""

    attribute: str
    excess: Dict[str, int] = Field(default_factory=dict)
    deficit: Dict[str, int] = Field(default_factory=dict)
    remaining_excess: Dict[str, int] = Field(default_factory=dict)
    remaining_deficit: Dict[str, int] = Field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not any(self.excess.values())

    @property
    def exhausted(self) -> bool:
        return not any(self.remaining_excess.values())

    def target_group(self) -> Optional[str]:
        open_groups = [g for g, v in self.remaining_deficit.items() if v > 0]
        if not open_groups:
            return None
        return min(open_groups, key=lambda g: (-self.remaining_deficit[g], g))


def plan_targets(counts: GroupCounts, target_epsilon: float = 0.0) -> SubstitutionPlan:
    """Plan how many majority occurrences to convert so every group nears total/M.

    The majority's excess above the balanced target is split evenly across the
    other groups; the remainder goes to the lexicographically first ones.
    """
    plan = SubstitutionPlan(attribute=counts.attribute)
    total = counts.total
    if total == 0 or compute_dr(counts) <= target_epsilon:
        return plan

    majority, _ = majority_minority(counts)
    others = sorted(g for g in counts.counts if g != majority)
    excess = counts.counts[majority] - math.ceil(total / len(counts.counts))
    if excess <= 0:
        return plan

    share, remainder = divmod(excess, len(others))
    deficit = {g: share + (1 if i < remainder else 0) for i, g in enumerate(others)}
    deficit = {g: v for g, v in deficit.items() if v > 0}
    plan.excess = {majority: excess}
    plan.deficit = deficit
    plan.remaining_excess = dict(plan.excess)
    plan.remaining_deficit = dict(deficit)
    return plan


# Surface-form helpers


def match_case(replacement: str, original: str) -> str:
    if len(original) > 1 and original.isupper():
        return replacement.upper()
    if original[:1].isupper():
        return replacement[:1].upper() + replacement[1:]
    return replacement


def _next_token(text: str, end: int, tokenizer: Tokenizer) -> Optional[str]:
    rest = text[end:]
    if re.match(r"\s*[.!?,;:)\]\"]", rest):
        return None
    tokens = tokenizer.tokenize(rest)
    return tokens[0] if tokens else None


def pronoun_replacement(entry: str, text: str, match: WordMatch, target_entries, tokenizer: Tokenizer) -> Optional[str]:
    """Resolve possessive/objective pronouns by whether a noun-like token follows"""
    forms = {"her": ("his", "him"), "his": ("her", "hers")}
    if entry not in forms:
        return None
    nxt = _next_token(text, match.end, tokenizer)
    noun_follows = nxt is not None and nxt not in NON_NOUN_CUES
    choice = forms[entry][0] if noun_follows else forms[entry][1]
    return choice if choice in target_entries else None


def _rewrite(text: str, replacements: Sequence[Tuple[WordMatch, str]]) -> str:
    pieces = []
    cursor = 0
    for match, word in sorted(replacements, key=lambda r: r[0].start):
        pieces.append(text[cursor : match.start])
        pieces.append(match_case(word, text[match.start : match.end]))
        cursor = match.end
    pieces.append(text[cursor:])
    return "".join(pieces)


# BaseCDA


def substitute_base(
    entity: SentenceEntity,
    matcher: Matcher,
    source: WordList,
    target: WordList,
    rng: np.random.Generator,
    probability: float,
) -> Optional[str]:
    """Rewrite every source-group occurrence with probability `probability`.

    One random draw decides per sentence. Counterpart tuples are used when the
    source list points at the target group; otherwise a random target entry.
    """
    occurrences = [m for m in matcher.find(entity.text) if m.group == source.group]
    if not occurrences:
        return None
    if rng.random() >= probability:
        return None

    counterparts = source.counterpart if source.counterpart_group == target.group else {}
    target_entries = set(target.entries)
    replacements = []
    for match in occurrences:
        word = pronoun_replacement(match.entry, entity.text, match, target_entries, matcher.tokenizer)
        if word is None:
            word = counterparts.get(match.entry)
        if word is None and target.entries:
            word = target.entries[int(rng.integers(len(target.entries)))]
        if word is None:
            logger.warning(f"No replacement for {match.entry!r} in {entity.doc_id}#{entity.sent_id}")
            continue
        replacements.append((match, word))
    if not replacements:
        return None

    new_text = _rewrite(entity.text, replacements)
    entity.metadata.text_cda = new_text
    entity.metadata.counts_per_group_cda = matcher.count(new_text)
    return new_text


# GC-CDA


def _clean_choice(answer: str) -> str:
    return answer.strip().strip("\"'*`.,;:!").strip().lower()


def select_word(
    sentence: str,
    original_word: str,
    candidates: Sequence[str],
    client: Optional[LlmClient],
    rng: np.random.Generator,
    ratio: float,
) -> str:
    """Pick a replacement: the LLM's choice with probability `ratio`, otherwise uniform random.

    An LLM answer outside the candidate list falls back to random.
    """
    if not candidates:
        raise ValueError("select_word needs at least one candidate")
    use_llm = rng.random() < ratio
    if use_llm and client is not None:
        request = client.build_request("word_swap", PromptTemplate.word_swap(sentence, original_word, candidates))
        try:
            answer = _clean_choice(client.complete(request))
            by_lower = {c.lower(): c for c in candidates}
            if answer in by_lower:
                return by_lower[answer]
            logger.warning(f"Word choice {answer!r} is not a candidate for {original_word!r}; using random")
        except LlmRequestError as e:
            logger.warning(f"Word selection failed for {original_word!r}, using random: {e}")
    return candidates[int(rng.integers(len(candidates)))]


def verify(original: str, modified: str, client: LlmClient) -> bool:
    """True only for an exact one-word VALID judgement"""
    request = client.build_request("text_verification", PromptTemplate.text_verification(original, modified))
    try:
        answer = client.complete(request)
    except LlmRequestError as e:
        logger.warning(f"Verification request failed, substitution discarded: {e}")
        return False
    verdict = answer.strip().strip(".").strip().upper()
    if verdict not in ("VALID", "INVALID"):
        logger.warning(f"Unparseable verification answer {answer[:40]!r}, treated as INVALID")
    return verdict == "VALID"


class GcOutcome(BaseModel):
    substituted: int = 0
    rejected: int = 0
    skipped_capacity: int = 0


def substitute_gc(
    entities: Sequence[SentenceEntity],
    plan: SubstitutionPlan,
    matcher: Matcher,
    lists: Dict[str, WordList],
    selector: Optional[LlmClient],
    verifier: LlmClient,
    rng: np.random.Generator,
    config: CdaConfig,
) -> GcOutcome:
    """Targeted substitution over prechecked entities until the plan's excess is used up.

    Entities are visited in (doc_id, sent_id) order. All source occurrences of
    a chosen sentence move to the single target group with the largest
    remaining deficit; the change is committed only on a VALID verification.
    """
    outcome = GcOutcome()
    if plan.is_empty:
        return outcome

    ordered = sorted(entities, key=lambda e: (e.doc_id, e.sent_id))
    for entity in tqdm(ordered, desc="GC-CDA", disable=not settings.SHOW_PROGRESS):
        if plan.exhausted:
            break
        md = entity.metadata
        if md.skip_reason is not None or md.remove_sentence:
            continue

        found = matcher.find(entity.text)
        sources = [g for g, v in plan.remaining_excess.items() if v > 0]
        occurrences = [m for m in found if m.group in sources]
        if not occurrences:
            continue
        source = occurrences[0].group
        occurrences = [m for m in occurrences if m.group == source]
        target = plan.target_group()
        if target is None:
            break
        n = len(occurrences)
        if n > plan.remaining_excess[source] or n > plan.remaining_deficit[target]:
            outcome.skipped_capacity += 1
            continue

        source_list, target_list = lists[source], lists[target]
        counterparts = source_list.counterpart if source_list.counterpart_group == target else {}
        target_entries = set(target_list.entries)
        replacements = []
        for match in occurrences:
            word = pronoun_replacement(match.entry, entity.text, match, target_entries, matcher.tokenizer)
            if word is None:
                word = counterparts.get(match.entry)
            if word is None:
                word = select_word(
                    entity.text, entity.text[match.start : match.end], target_list.entries,
                    selector, rng, config.llm_selection_ratio,
                )
            replacements.append((match, word))

        new_text = _rewrite(entity.text, replacements)
        if new_text == entity.text:
            continue
        if not verify(entity.text, new_text, verifier):
            outcome.rejected += 1
            continue

        before = Counter(m.group for m in found)
        after_counts = matcher.count(new_text)
        moved_out = before[source] - after_counts.get(source, 0)
        moved_in = after_counts.get(target, 0) - before[target]
        md.text_cda = new_text
        md.counts_per_group_cda = after_counts
        plan.remaining_excess[source] = max(0, plan.remaining_excess[source] - moved_out)
        plan.remaining_deficit[target] = max(0, plan.remaining_deficit[target] - moved_in)
        outcome.substituted += 1

    logger.info(
        f"GC-CDA substituted {outcome.substituted} sentences, {outcome.rejected} rejected by verification; "
        f"residual excess {plan.remaining_excess}"
    )
    return outcome


class CdaReport(BaseModel):
    mode: CdaMode
    seed: int
    eligible: int
    substituted: int
    verification_rejected: int = 0
    skip_histogram: Dict[str, int] = Field(default_factory=dict)
    plan: Optional[Dict[str, Dict[str, int]]] = None
    residual: Optional[Dict[str, Dict[str, int]]] = None
    counts_before: Dict[str, int]
    counts_after: Dict[str, int]
    dr_before: float
    dr_after: float


def _reset_stage(entity: SentenceEntity):
    entity.metadata.text_cda = None
    entity.metadata.counts_per_group_cda = None
    entity.metadata.skip_reason = None


def run_cda(
    entities: Sequence[SentenceEntity],
    spec: AttributeSpec,
    lists: Sequence[WordList],
    config: CdaConfig,
    precheck_lists: Optional[PrecheckLists] = None,
    selector: Optional[LlmClient] = None,
    verifier: Optional[LlmClient] = None,
    matcher: Optional[Matcher] = None,
    expected: Optional[Dict[str, float]] = None,
) -> CdaReport:
    """Run prechecks and the configured CDA mode over all entities; returns the run report.

    DR after CDA is recomputed from the counterfactual texts.
    """
    mode = CdaMode(config.mode)
    if mode == CdaMode.GC and verifier is None:
        raise ConfigError("GC-CDA needs a verification endpoint")
    matcher = matcher or Matcher(lists)
    by_group = {wl.group: wl for wl in lists}
    rng = np.random.default_rng(config.rng_seed)

    for entity in entities:
        _reset_stage(entity)
    counts_before = aggregate_counts(entities, spec, after_mitigation=True)

    index = _KeywordIndex(precheck_lists or load_precheck_lists(), matcher.tokenizer)
    skips = Counter(precheck(e, mode, index=index) for e in entities)
    skips.pop(None, None)
    passing = [e for e in sorted(entities, key=lambda e: (e.doc_id, e.sent_id)) if e.metadata.skip_reason is None]

    plan = None
    rejected = 0
    if mode == CdaMode.BASE:
        majority, minority = majority_minority(counts_before)
        substituted = 0
        if majority == minority:
            # equal counts for every group, including an empty corpus
            eligible = []
            logger.info(f"{spec.attribute} counts are balanced, BaseCDA skipped")
        else:
            eligible = [e for e in passing if e.metadata.counts_per_group.get(majority, 0) > 0]
            for entity in eligible:
                if substitute_base(
                    entity, matcher, by_group[majority], by_group[minority], rng, config.substitution_probability
                ):
                    substituted += 1
            logger.info(f"BaseCDA substituted {substituted} of {len(eligible)} eligible sentences ({majority} -> {minority})")
    else:
        plan = plan_targets(counts_before, config.target_epsilon)
        eligible = [e for e in passing if any(e.metadata.counts_per_group.get(g, 0) for g in plan.excess)]
        outcome = substitute_gc(passing, plan, matcher, by_group, selector, verifier, rng, config)
        substituted, rejected = outcome.substituted, outcome.rejected

    counts_after = aggregate_counts(entities, spec, after_mitigation=True)
    return CdaReport(
        mode=mode,
        seed=config.rng_seed,
        eligible=len(eligible),
        substituted=substituted,
        verification_rejected=rejected,
        skip_histogram=dict(sorted(skips.items())),
        plan={"excess": plan.excess, "deficit": plan.deficit} if plan else None,
        residual={"excess": plan.remaining_excess, "deficit": plan.remaining_deficit} if plan else None,
        counts_before=counts_before.counts,
        counts_after=counts_after.counts,
        dr_before=compute_dr(counts_before, expected),
        dr_after=compute_dr(counts_after, expected),
    )
