# Corpus Module
# Corpus ingestion, rule-based sentence segmentation, the metadata store and
# reconstruction of the debiased corpus from sentence metadata.

import json
import os
import re
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence

from loguru import logger
from pydantic import ValidationError
from tqdm import tqdm

from .config import DataPaths, settings
from .exceptions import (
    CorpusFormatError,
    DuplicateDocIdError,
    StoreCorruptError,
    UnknownDocumentError,
)
from .models import Document, SentenceEntity

# terminal punctuation, optional closing quotes/brackets, then whitespace and
# the first character of the next sentence
_TERMINAL = re.compile(r"(?P<punct>[.!?]+)(?P<close>[\"'”’)\]]*)(?=\s+(?P<next>\S))")
_OPENERS = frozenset("\"'“‘([")


def load_abbreviations(path=None) -> FrozenSet[str]:
    """Read the abbreviation stop-list (one lowercase entry per line, '#' comments)"""
    path = Path(path or DataPaths.ABBREVIATIONS)
    entries = set()
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip().lower()
        if line and not line.startswith("#"):
            entries.add(line)
    return frozenset(entries)


_default_abbreviations: Optional[FrozenSet[str]] = None


def default_abbreviations() -> FrozenSet[str]:
    global _default_abbreviations
    if _default_abbreviations is None:
        _default_abbreviations = load_abbreviations()
    return _default_abbreviations


def load_corpus(path) -> List[Document]:
    """Load a JSONL corpus of {"doc_id", "text"} records in file order"""
    path = Path(path)
    documents = []
    seen = set()
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(path, line_no, f"invalid JSON: {e.msg}") from e
            if not isinstance(record, dict):
                raise CorpusFormatError(path, line_no, "expected a JSON object")
            doc_id, text = record.get("doc_id"), record.get("text")
            if not isinstance(doc_id, str) or not doc_id:
                raise CorpusFormatError(path, line_no, "missing or empty string field 'doc_id'")
            if not isinstance(text, str):
                raise CorpusFormatError(path, line_no, "missing string field 'text'")
            if doc_id in seen:
                raise DuplicateDocIdError(doc_id, line_no)
            seen.add(doc_id)
            documents.append(Document(doc_id=doc_id, text=text))
    logger.info(f"Loaded {len(documents)} documents from {path}")
    return documents


def write_corpus(documents: Iterable[Document], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for doc in documents:
            handle.write(json.dumps({"doc_id": doc.doc_id, "text": doc.text}, ensure_ascii=False))
            handle.write("\n")


def _is_abbreviation(text: str, sentence_start: int, match, abbreviations) -> bool:
    if match.group("punct") != ".":
        return False
    word_end = match.end("punct")
    word_start = word_end
    while word_start > sentence_start and not text[word_start - 1].isspace():
        word_start -= 1
    word = text[word_start:word_end].lstrip("\"'“‘([").lower()
    return word in abbreviations


def segment(doc: Document, abbreviations: Optional[FrozenSet[str]] = None) -> List[SentenceEntity]:
    """Split a document into sentence entities with exact character offsets.

    Offsets are Python string indices into doc.text. Whitespace between
    sentences, before the first and after the last belongs to no sentence.
    """
    if abbreviations is None:
        abbreviations = default_abbreviations()
    text = doc.text

    spans = []
    start = 0
    for match in _TERMINAL.finditer(text):
        nxt = match.group("next")
        if not (nxt.isupper() or nxt in _OPENERS):
            continue
        if _is_abbreviation(text, start, match, abbreviations):
            continue
        spans.append((start, match.end()))
        start = match.end()
    spans.append((start, len(text)))

    entities = []
    for begin, end in spans:
        while begin < end and text[begin].isspace():
            begin += 1
        while end > begin and text[end - 1].isspace():
            end -= 1
        if begin == end:
            continue
        entities.append(
            SentenceEntity(
                doc_id=doc.doc_id,
                sent_id=len(entities),
                char_start=begin,
                char_end=end,
                text=text[begin:end],
            )
        )
    return entities


def segment_corpus(
    documents: Sequence[Document],
    abbreviations: Optional[FrozenSet[str]] = None,
    workers: int = 1,
) -> List[SentenceEntity]:
    """Segment every document; output order follows document order for any worker count"""
    if abbreviations is None:
        abbreviations = default_abbreviations()

    def run(doc):
        return segment(doc, abbreviations)

    progress = dict(total=len(documents), desc="Segmenting", disable=not settings.SHOW_PROGRESS)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_doc = list(tqdm(pool.map(run, documents), **progress))
    else:
        per_doc = [run(doc) for doc in tqdm(documents, **progress)]

    entities = [entity for doc_entities in per_doc for entity in doc_entities]
    logger.info(f"Segmented {len(documents)} documents into {len(entities)} sentences")
    return entities


def build_debiased(entities: Iterable[SentenceEntity], corpus: Sequence[Document]) -> List[Document]:
    """Rebuild the corpus from sentence metadata.

    Removed sentences are dropped together with their leading separator;
    substituted sentences are replaced by their counterfactual text.
    """
    by_doc: Dict[str, List[SentenceEntity]] = defaultdict(list)
    known = {doc.doc_id for doc in corpus}
    for entity in entities:
        if entity.doc_id not in known:
            raise UnknownDocumentError(entity.doc_id)
        by_doc[entity.doc_id].append(entity)

    output = []
    for doc in corpus:
        doc_entities = sorted(by_doc.get(doc.doc_id, []), key=lambda e: e.sent_id)
        if not doc_entities:
            output.append(Document(doc_id=doc.doc_id, text=doc.text))
            continue

        text = doc.text
        pieces = [text[: doc_entities[0].char_start]]
        emitted = False
        previous_end = doc_entities[0].char_start
        for entity in doc_entities:
            separator = text[previous_end : entity.char_start]
            previous_end = entity.char_end
            if entity.metadata.remove_sentence:
                continue
            if emitted:
                pieces.append(separator)
            body = entity.metadata.text_cda if entity.metadata.text_cda is not None else entity.text
            pieces.append(body)
            emitted = True

        if emitted:
            pieces.append(text[previous_end:])
            output.append(Document(doc_id=doc.doc_id, text="".join(pieces)))
        else:
            output.append(Document(doc_id=doc.doc_id, text=""))
    return output


class MetadataStore:
    """JSONL checkpoint of all sentence entities plus the completed stage list.

    With in_memory=True nothing touches disk; the store only holds the latest
    entity list between stages.
    """

    FILE_NAME = "metadata.jsonl"
    STAGES_FILE = "stages.json"

    def __init__(self, directory, in_memory: bool = False):
        self.directory = Path(directory)
        self.in_memory = in_memory
        self._entities: Optional[List[SentenceEntity]] = None
        self._stages: List[str] = []

    @property
    def path(self) -> Path:
        return self.directory / self.FILE_NAME

    @property
    def stages_path(self) -> Path:
        return self.directory / self.STAGES_FILE

    def exists(self) -> bool:
        if self.in_memory:
            return self._entities is not None
        return self.path.is_file()

    def write(self, entities: Iterable[SentenceEntity]):
        ordered = sorted(entities, key=lambda e: (e.doc_id, e.sent_id))
        if self.in_memory:
            self._entities = [e.model_copy(deep=True) for e in ordered]
            return
        self.directory.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".jsonl.tmp")
        with tmp.open("w", encoding="utf-8") as handle:
            for entity in ordered:
                handle.write(entity.to_json_line())
                handle.write("\n")
        os.replace(tmp, self.path)
        logger.debug(f"Metadata store written: {len(ordered)} entities -> {self.path}")

    def read(self) -> List[SentenceEntity]:
        if self.in_memory:
            return [e.model_copy(deep=True) for e in (self._entities or [])]
        if not self.path.is_file():
            return []
        entities = []
        with self.path.open(encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    entities.append(SentenceEntity.model_validate_json(line))
                except ValidationError as e:
                    raise StoreCorruptError(self.path, line_no, str(e).splitlines()[0]) from e
        return entities

    def stamp(self, stage: str):
        if stage not in self._load_stages():
            self._stages = self._load_stages() + [stage]
            self._save_stages()

    def reset_after(self, stage: Optional[str]):
        """Forget every stage stamped after `stage` (all of them when None)"""
        stages = self._load_stages()
        keep = stages[: stages.index(stage) + 1] if stage in stages else []
        self._stages = keep
        self._save_stages()

    def completed_stages(self) -> List[str]:
        return list(self._load_stages())

    def _load_stages(self) -> List[str]:
        if self.in_memory or not self.stages_path.is_file():
            return list(self._stages)
        try:
            return list(json.loads(self.stages_path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise StoreCorruptError(self.stages_path, e.lineno, e.msg) from e

    def _save_stages(self):
        if self.in_memory:
            return
        self.directory.mkdir(parents=True, exist_ok=True)
        self.stages_path.write_text(json.dumps(self._stages, indent=2) + "\n", encoding="utf-8")
