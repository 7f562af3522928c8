# Word List Module
# LLM-based word-list generation, completeness expansion, corpus frequency
# filtering, top-k selection, human review and word-list persistence.

import json
import sys
from collections import Counter
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import pandas as pd
from loguru import logger
from pydantic import ValidationError

from .config import DataPaths
from .exceptions import ConfigError, PayloadParseError, WordListGenerationError
from .llm import LlmClient, parse_json_payload, structured_many
from .models import AttributeSpec, Document, GenerationParams, SelectionMode, WordList
from .prompts import PromptTemplate
from .repbias import Tokenizer, default_tokenizer

# Quality criteria a validated word must satisfy
QUALITY_CRITERIA = {
    "Q1": "a category label referring to the group or a member of it",
    "Q2": "linguistically correct (spelling)",
    "Q3": "unambiguous, exclusive to this group for this attribute",
    "Q4": "free of association (no professions, traits or attributes)",
    "Q5": "simple, not a compound of a label and a neutral word",
    "Q6": "not a proper name",
}


# Persistence


def load_wordlist(path) -> WordList:
    path = Path(path)
    try:
        return WordList.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read word list {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid word list {path}: {e}") from e


def save_wordlist(wordlist: WordList, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = wordlist.model_dump(exclude_none=True)
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_wordlists(directory, spec: AttributeSpec) -> List[WordList]:
    """Load `<group>.json` for every group of the attribute, in group order"""
    directory = Path(directory)
    lists = []
    for group in spec.groups:
        path = directory / f"{group}.json"
        if not path.is_file():
            raise ConfigError(f"no word list for group {group!r}: {path} does not exist")
        wordlist = load_wordlist(path)
        if wordlist.attribute != spec.attribute or wordlist.group != group:
            raise ConfigError(
                f"{path} holds {wordlist.attribute}/{wordlist.group}, expected {spec.attribute}/{group}"
            )
        lists.append(wordlist)
    return prune_counterparts(lists)


def prune_counterparts(lists: Sequence[WordList]) -> List[WordList]:
    """Drop counterpart entries whose source or target word is no longer listed"""
    entries = {wl.group: set(wl.entries) for wl in lists}
    pruned = []
    for wl in lists:
        target = entries.get(wl.counterpart_group, set()) if wl.counterpart_group else set()
        kept = {w: c for w, c in wl.counterpart.items() if w in entries[wl.group] and c in target}
        if len(kept) != len(wl.counterpart):
            logger.debug(f"Pruned {len(wl.counterpart) - len(kept)} stale counterparts from {wl.group}")
        pruned.append(wl.model_copy(update={"counterpart": kept}))
    return pruned


def load_few_shots(attribute: str) -> Dict[str, Dict[str, List[str]]]:
    """Shipped positive/negative generation examples for an attribute, if any"""
    path = DataPaths.FEW_SHOTS / f"{attribute}.json"
    if not path.is_file():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


def _dedupe(words: Iterable[str]) -> List[str]:
    seen = set()
    result = []
    for word in words:
        word = word.strip().lower()
        if word and word not in seen:
            seen.add(word)
            result.append(word)
    return result


# Generation


def _parse_word_array(text: str) -> List[str]:
    payload = parse_json_payload(text)
    if isinstance(payload, dict):
        # some models wrap the array in an object
        arrays = [v for v in payload.values() if isinstance(v, list)]
        if len(arrays) != 1:
            raise PayloadParseError("expected a JSON array of words")
        payload = arrays[0]
    if not isinstance(payload, list) or not all(isinstance(w, str) for w in payload):
        raise PayloadParseError("expected a JSON array of strings")
    return payload


def generate_raw(spec: AttributeSpec, params: GenerationParams, client: LlmClient) -> Dict[str, List[str]]:
    """Run `params.runs` independent generation requests per group and merge them.

    Each run carries its own request tag so transcripts replay every run exactly.
    """
    few_shots = params.few_shots or load_few_shots(spec.attribute)
    raw: Dict[str, List[str]] = {}
    for group in spec.groups:
        messages = PromptTemplate.wordlist_generation(spec.attribute, group, few_shots, params.words_per_run)
        requests = [
            client.build_request("wordlist_generation", messages, tag=f"{spec.attribute}/{group}/run-{run}")
            for run in range(params.runs)
        ]
        results = structured_many(client, requests, _parse_word_array)

        merged: List[str] = []
        failed = 0
        for run, result in enumerate(results):
            if isinstance(result, Exception):
                failed += 1
                logger.warning(f"Generation run {run} for {group!r} skipped: {result}")
                continue
            merged.extend(result)
        if failed == len(results):
            raise WordListGenerationError(f"all {failed} generation runs failed for group {group!r}")

        raw[group] = _dedupe(merged)
        if not raw[group]:
            logger.warning(f"Generation produced no words for group {group!r}")
        logger.info(f"Generated {len(raw[group])} unique words for {spec.attribute}/{group}")
    return raw


def _parse_completeness(text: str) -> List[dict]:
    payload = parse_json_payload(text, expected_fields=["words"])
    items = payload["words"]
    if not isinstance(items, list) or not all(isinstance(i, dict) and isinstance(i.get("word"), str) for i in items):
        raise PayloadParseError("'words' must be a list of objects with a 'word' field")
    return items


def _word_forms(value) -> List[str]:
    """Singular and plural strings from a counterpart value (string or {word, plural})"""
    if isinstance(value, str):
        return [value]
    if isinstance(value, dict):
        return [v for v in (value.get("word"), value.get("plural")) if isinstance(v, str)]
    return []


def expand_completeness(
    lists: Mapping[str, WordList], spec: AttributeSpec, client: LlmClient
) -> Dict[str, WordList]:
    """Add LLM-proposed plurals and cross-group counterparts to every list.

    Counterpart maps are recorded for two-group attributes only. A group whose
    request fails contributes nothing and its list stays as it was.
    """
    entries = {group: list(lists[group].entries) for group in spec.groups}
    counterparts = {group: dict(lists[group].counterpart) for group in spec.groups}
    binary = spec.size == 2

    def add(group: str, word: Optional[str]) -> Optional[str]:
        if not word:
            return None
        word = word.strip().lower()
        if word and word not in entries[group]:
            entries[group].append(word)
        return word or None

    def pair(group: str, word: Optional[str], other: str, other_word: Optional[str]):
        if not (binary and word and other_word):
            return
        forward, backward = counterparts[group], counterparts[other]
        if word not in forward and other_word not in forward.values():
            forward[word] = other_word
        if other_word not in backward and word not in backward.values():
            backward[other_word] = word

    groups = [g for g in spec.groups if lists[g].entries]
    requests = [
        client.build_request(
            "completeness",
            PromptTemplate.completeness(
                spec.attribute, group, [g for g in spec.groups if g != group], lists[group].entries
            ),
        )
        for group in groups
    ]
    results = structured_many(client, requests, _parse_completeness)

    for group, result in zip(groups, results):
        if isinstance(result, Exception):
            logger.warning(f"Completeness expansion failed for {group!r}, list left unchanged: {result}")
            continue
        for item in result:
            word = add(group, item["word"])
            plural = add(group, item.get("plural")) if isinstance(item.get("plural"), str) else None
            for other, value in (item.get("counterparts") or {}).items():
                if other == group or other not in entries:
                    continue
                forms = _word_forms(value)
                if not forms:
                    continue
                other_word = add(other, forms[0])
                other_plural = add(other, forms[1]) if len(forms) > 1 else None
                pair(group, word, other, other_word)
                pair(group, plural, other, other_plural)

    expanded = {}
    for group in spec.groups:
        counterpart_group = None
        if binary:
            counterpart_group = next(g for g in spec.groups if g != group)
        expanded[group] = lists[group].model_copy(
            update={
                "entries": entries[group],
                "counterpart": counterparts[group],
                "counterpart_group": counterpart_group if counterparts[group] else lists[group].counterpart_group,
            }
        )
    return expanded


# Frequency filtering and selection


def compute_frequencies(
    words: Iterable[str], corpus: Sequence[Document], tokenizer: Optional[Tokenizer] = None
) -> Dict[str, int]:
    """Case-insensitive token-level occurrence counts; multi-token words count
    contiguous token-sequence matches"""
    tokenizer = tokenizer or default_tokenizer()
    keys = {word: tuple(tokenizer.tokenize(word)) for word in words}
    lengths = {len(k) for k in keys.values() if k}
    ngrams: Counter = Counter()
    for doc in corpus:
        tokens = tokenizer.tokenize(doc.text)
        for n in lengths:
            ngrams.update(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return {word: (ngrams[key] if key else 0) for word, key in keys.items()}


def frequency_table(lists: Sequence[WordList], freqs: Mapping[str, int]) -> pd.DataFrame:
    rows = [
        {"group": wl.group, "word": word, "frequency": int(freqs.get(word, 0))}
        for wl in lists
        for word in wl.entries
    ]
    table = pd.DataFrame(rows, columns=["group", "word", "frequency"])
    return table.sort_values(["group", "frequency", "word"], ascending=[True, False, True]).reset_index(drop=True)


def filter_and_select(wordlist: WordList, freqs: Mapping[str, int], params: GenerationParams) -> WordList:
    """Drop zero-frequency words, then keep k words by frequency or generation order"""
    survivors = [w for w in wordlist.entries if freqs.get(w, 0) > 0]
    if SelectionMode(params.selection_mode) == SelectionMode.FREQUENCY:
        selected = sorted(survivors, key=lambda w: (-freqs[w], w))[: params.validation_count]
    else:
        selected = survivors[: params.validation_count]
    kept = set(selected)
    counterpart = {w: c for w, c in wordlist.counterpart.items() if w in kept}
    return wordlist.model_copy(update={"entries": selected, "counterpart": counterpart})


# Human review


class ReviewAborted(Exception):
    pass


def _load_decisions(path) -> Dict[tuple, dict]:
    decisions = {}
    path = Path(path)
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            decisions[(record["word"].lower(), record["group"])] = record
        except (json.JSONDecodeError, KeyError, AttributeError) as e:
            raise ConfigError(f"{path}:{line_no}: invalid review decision: {e}") from e
    return decisions


def _ask(word: str, group: str, input_fn: Callable[[str], str], output_fn: Callable[[str], None]) -> dict:
    output_fn(f"\n[{group}] {word}")
    answer = input_fn("keep (k) / reject (r) / edit (e) / quit (q)? ").strip().lower()
    while answer not in ("k", "r", "e", "q"):
        answer = input_fn("please answer k, r, e or q: ").strip().lower()
    if answer == "q":
        raise ReviewAborted()
    if answer == "k":
        return {"word": word, "group": group, "keep": True, "reasons": []}
    if answer == "e":
        edit = input_fn("replacement word: ").strip().lower()
        return {"word": word, "group": group, "keep": True, "reasons": [], "edit": edit}
    raw = input_fn(f"violated criteria ({', '.join(QUALITY_CRITERIA)}): ")
    reasons = [r.strip().upper() for r in raw.split(",") if r.strip().upper() in QUALITY_CRITERIA]
    return {"word": word, "group": group, "keep": False, "reasons": reasons}


def review_interactive(
    wordlist: WordList,
    decisions_path=None,
    audit_path=None,
    input_fn: Optional[Callable[[str], str]] = None,
    output_fn: Callable[[str], None] = print,
) -> WordList:
    """Human validation of a word list against the quality criteria.

    Decisions come from a JSONL decisions file (non-interactive replay) or
    from the terminal. Every decision is appended to the audit file as it is
    made; an aborted session keeps the partial audit and returns the list
    unchanged.
    """
    decisions = _load_decisions(decisions_path) if decisions_path else None
    if decisions is None and input_fn is None:
        if not sys.stdin.isatty():
            raise ConfigError("word list review needs a decisions file or an interactive terminal")
        input_fn = input

    audit = Path(audit_path) if audit_path else None
    if audit:
        audit.parent.mkdir(parents=True, exist_ok=True)

    if decisions is None:
        output_fn(f"Reviewing {len(wordlist.entries)} {wordlist.attribute}/{wordlist.group} words. Criteria:")
        for key, text in QUALITY_CRITERIA.items():
            output_fn(f"  {key}: {text}")

    kept: List[str] = []
    try:
        for word in wordlist.entries:
            if decisions is not None:
                decision = decisions.get((word, wordlist.group))
                if decision is None:
                    kept.append(word)
                    continue
            else:
                decision = _ask(word, wordlist.group, input_fn, output_fn)

            if audit:
                with audit.open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps(decision, ensure_ascii=False) + "\n")
            if decision.get("keep", True):
                kept.append((decision.get("edit") or word).strip().lower())
    except (ReviewAborted, EOFError, KeyboardInterrupt):
        logger.warning(f"Review of {wordlist.group!r} aborted; word list left unchanged")
        return wordlist

    entries = _dedupe(kept)
    removed = len(wordlist.entries) - len(entries)
    logger.info(f"Review of {wordlist.group!r}: {len(entries)} kept, {removed} removed")
    counterpart = {w: c for w, c in wordlist.counterpart.items() if w in set(entries)}
    return wordlist.model_copy(update={"entries": entries, "counterpart": counterpart})
