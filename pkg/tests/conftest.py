"""
Shared fixtures: a scripted LLM backend, small gender word lists and tiny corpora.
No test talks to a real endpoint.
"""

import json
from typing import Callable, Dict, List

import httpx
import openai
import pytest
from tenacity import wait_none

from corpusbias.config import EndpointConfig, TranscriptMode
from corpusbias.llm import ChatRequest, LlmClient, Transcript
from corpusbias.models import AttributeSpec, Document, WordList

GENDER_PAIRS = [
    ("he", "she"),
    ("him", "her"),
    ("his", "hers"),
    ("man", "woman"),
    ("men", "women"),
    ("father", "mother"),
    ("king", "queen"),
    ("boy", "girl"),
]


def transient_error() -> Exception:
    return openai.APITimeoutError(request=httpx.Request("POST", "https://stub.invalid/v1/chat/completions"))


def last_user(request: ChatRequest) -> str:
    return [m.content for m in request.messages if m.role == "user"][-1]


def sentence_of(request: ChatRequest) -> str:
    """The sentence under test in a detection/assessment prompt"""
    return last_user(request).rsplit("Sentence: ", 1)[-1]


def modified_of(request: ChatRequest) -> str:
    return last_user(request).split("Sentence 2 (Modified): ", 1)[1].strip().strip('"')


class StubBackend:
    """Scripted backend: one responder per request purpose, every call recorded"""

    def __init__(self, responders: Dict[str, Callable[[ChatRequest], str]] = None):
        self.responders = dict(responders or {})
        self.calls: List[ChatRequest] = []

    def __call__(self, request: ChatRequest, endpoint: EndpointConfig) -> str:
        self.calls.append(request)
        purpose = request.purpose.split(":")[0]
        if purpose not in self.responders:
            raise AssertionError(f"unexpected {purpose} request")
        result = self.responders[purpose](request)
        if isinstance(result, Exception):
            raise result
        return result

    def purposes(self) -> List[str]:
        return [c.purpose for c in self.calls]


def detection_answer(stereotype: bool) -> str:
    if not stereotype:
        return json.dumps(
            {
                "has_category_label": "no",
                "full_label": "not-applicable",
                "beliefs_expectancies": "not-applicable",
                "information": "not-applicable",
                "behavior_features_traits": "not-applicable",
                "stereotype": "no",
            }
        )
    return json.dumps(
        {
            "has_category_label": "yes",
            "full_label": "women",
            "beliefs_expectancies": "yes",
            "information": "are bad drivers",
            "behavior_features_traits": "yes",
            "stereotype": "yes",
        }
    )


STRONG_INDICATORS = {
    "has_category_label": "yes",
    "full_label": "women",
    "target_type": "generic",
    "connotation": "negative",
    "gram_form": "noun",
    "ling_form": "generic",
    "information": "are bad drivers",
    "situation": "enduring",
    "situation_evaluation": "negative",
    "generalization": "abstract",
}

WEAK_INDICATORS = {
    "has_category_label": "yes",
    "full_label": "my neighbour",
    "target_type": "specific",
    "connotation": "positive",
    "gram_form": "noun",
    "ling_form": "individual",
    "information": "helped me",
    "situation": "situational",
    "situation_evaluation": "positive",
    "generalization": "concrete",
}


@pytest.fixture(autouse=True)
def no_retry_wait(monkeypatch):
    monkeypatch.setattr(LlmClient, "retry_wait", wait_none())


@pytest.fixture
def gender_spec():
    return AttributeSpec(attribute="gender", groups=["female", "male"])


@pytest.fixture
def gender_lists():
    male = WordList(
        attribute="gender",
        group="male",
        entries=[m for m, _ in GENDER_PAIRS],
        counterpart={m: f for m, f in GENDER_PAIRS},
        counterpart_group="female",
    )
    female = WordList(
        attribute="gender",
        group="female",
        entries=[f for _, f in GENDER_PAIRS],
        counterpart={f: m for m, f in GENDER_PAIRS},
        counterpart_group="male",
    )
    return [female, male]


@pytest.fixture
def endpoint():
    return EndpointConfig(model="stub-model", parallelism=2, retries=3)


@pytest.fixture
def make_client(endpoint):
    def build(backend, mode=TranscriptMode.LIVE, path=None, **overrides):
        config = endpoint.model_copy(update=overrides) if overrides else endpoint
        return LlmClient(config, Transcript(path, mode), backend)

    return build


@pytest.fixture
def write_jsonl(tmp_path):
    def write(name, records):
        path = tmp_path / name
        path.write_text("".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records), encoding="utf-8")
        return path

    return write


@pytest.fixture
def tiny_corpus():
    return [
        Document(doc_id="d1", text="He is a software developer. She likes tea."),
        Document(doc_id="d2", text="The king spoke to his men.  Women always drive badly."),
        Document(doc_id="d3", text="Nothing relevant here."),
        Document(doc_id="d4", text="In 1945 he returned home. The president thanked him."),
        Document(doc_id="d5", text="My father and my mother met a boy."),
        Document(doc_id="d6", text="He said hello. He waved. He left."),
    ]
