# LLM Module
# Endpoint-agnostic chat-completion client with retry, record/replay
# transcripts, bounded-parallel dispatch and JSON payload parsing.

import hashlib
import json
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Literal, Optional, Sequence, TypeVar, Union

import openai
from loguru import logger
from pydantic import BaseModel, Field, ValidationError, field_validator
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_random_exponential

from .config import EndpointConfig, TranscriptMode
from .exceptions import LlmRequestError, MissingCredentialError, PayloadParseError, ReplayMissError

T = TypeVar("T")

# Failures worth retrying; anything else (bad request, auth) fails fast
TRANSIENT_ERRORS = (
    openai.APIConnectionError,
    openai.APITimeoutError,
    openai.RateLimitError,
    openai.InternalServerError,
)


class ChatMessage(BaseModel):
    role: Literal["system", "user", "assistant"]
    content: str


class ChatRequest(BaseModel):
    """One chat-completion request plus the purpose tag that scopes its cache key"""

    purpose: str
    model: str
    messages: List[ChatMessage]
    temperature: Optional[float] = Field(default=None, ge=0.0)
    max_output_tokens: Optional[int] = Field(default=None, ge=1)
    # distinguishes otherwise identical requests (generation run, probe run)
    tag: str = ""

    @field_validator("messages")
    @classmethod
    def _non_empty(cls, messages):
        if not messages:
            raise ValueError("a chat request needs at least one message")
        return messages

    @property
    def request_key(self) -> str:
        canonical = json.dumps(
            {
                "purpose": self.purpose,
                "tag": self.tag,
                "model": self.model,
                "messages": [m.model_dump() for m in self.messages],
                "temperature": self.temperature,
                "max_output_tokens": self.max_output_tokens,
            },
            sort_keys=True,
            ensure_ascii=False,
            separators=(",", ":"),
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Transcript:
    """Request-key -> response store persisted as JSONL {key, response}"""

    def __init__(self, path: Optional[Union[str, Path]] = None, mode: TranscriptMode = TranscriptMode.LIVE):
        self.path = Path(path) if path else None
        self.mode = TranscriptMode(mode)
        self._entries: Dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path and self.path.is_file():
            self._load()

    def _load(self):
        with self.path.open(encoding="utf-8") as handle:
            for line in handle:
                if line.strip():
                    record = json.loads(line)
                    self._entries[record["key"]] = record["response"]
        logger.debug(f"Loaded {len(self._entries)} transcript entries from {self.path}")

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> Optional[str]:
        return self._entries.get(key)

    def record(self, key: str, response: str):
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = response
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps({"key": key, "response": response}, ensure_ascii=False) + "\n")


Backend = Callable[[ChatRequest, EndpointConfig], str]


class OpenAIBackend:
    """Sends requests through the openai SDK to any compatible base_url"""

    def __init__(self, endpoint: EndpointConfig):
        api_key = os.getenv(endpoint.api_key_env)
        if not api_key:
            raise MissingCredentialError(endpoint.api_key_env)
        # retries are handled by tenacity in LlmClient
        self.client = openai.OpenAI(
            api_key=api_key,
            base_url=endpoint.base_url,
            timeout=endpoint.timeout,
            max_retries=0,
        )

    def __call__(self, request: ChatRequest, endpoint: EndpointConfig) -> str:
        params: Dict[str, Any] = {
            "model": request.model,
            "messages": [m.model_dump() for m in request.messages],
        }
        if request.temperature is not None:
            params["temperature"] = request.temperature
        if request.max_output_tokens is not None:
            params["max_tokens"] = request.max_output_tokens
        response = self.client.chat.completions.create(**params)
        return response.choices[0].message.content or ""


class LlmClient:
    """Chat client for one endpoint. Shareable across worker threads."""

    retry_wait = wait_random_exponential(multiplier=1, max=30)

    def __init__(
        self,
        endpoint: EndpointConfig,
        transcript: Optional[Transcript] = None,
        backend: Optional[Backend] = None,
    ):
        self.endpoint = endpoint
        self.transcript = transcript if transcript is not None else Transcript()
        self._backend = backend
        self._backend_lock = threading.Lock()

    @property
    def mode(self) -> TranscriptMode:
        return self.transcript.mode

    def _get_backend(self) -> Backend:
        with self._backend_lock:
            if self._backend is None:
                self._backend = OpenAIBackend(self.endpoint)
            return self._backend

    def build_request(
        self,
        purpose: str,
        messages: Sequence[Union[ChatMessage, Dict[str, str]]],
        tag: str = "",
        temperature: Optional[float] = None,
        max_output_tokens: Optional[int] = None,
    ) -> ChatRequest:
        return ChatRequest(
            purpose=purpose,
            model=self.endpoint.model,
            messages=[m if isinstance(m, ChatMessage) else ChatMessage(**m) for m in messages],
            temperature=temperature if temperature is not None else self.endpoint.temperature,
            max_output_tokens=max_output_tokens or self.endpoint.max_output_tokens,
            tag=tag,
        )

    def complete(self, request: ChatRequest) -> str:
        key = request.request_key
        if self.mode == TranscriptMode.REPLAY:
            response = self.transcript.get(key)
            if response is None:
                raise ReplayMissError(key)
            return response
        if self.mode == TranscriptMode.RECORD and key in self.transcript:
            return self.transcript.get(key)

        response = self._send(request)
        if self.mode == TranscriptMode.RECORD:
            self.transcript.record(key, response)
        return response

    def _send(self, request: ChatRequest) -> str:
        backend = self._get_backend()
        retrying = Retrying(
            stop=stop_after_attempt(self.endpoint.retries),
            wait=self.retry_wait,
            retry=retry_if_exception_type(TRANSIENT_ERRORS),
            reraise=True,
        )
        try:
            for attempt in retrying:
                with attempt:
                    return backend(request, self.endpoint)
        except TRANSIENT_ERRORS as e:
            raise LlmRequestError(
                f"{request.purpose} request failed after {self.endpoint.retries} attempts: {e}"
            ) from e
        except openai.OpenAIError as e:
            raise LlmRequestError(f"{request.purpose} request failed: {e}") from e

    def complete_many(self, requests: Sequence[ChatRequest], return_exceptions: bool = False) -> List[Any]:
        """Run requests with at most `parallelism` in flight; results follow input order"""

        def run(request):
            try:
                return self.complete(request)
            except Exception as e:
                if return_exceptions:
                    return e
                raise

        if not requests:
            return []
        with ThreadPoolExecutor(max_workers=self.endpoint.parallelism) as pool:
            return list(pool.map(run, requests))


_FENCE = re.compile(r"```(?:json|JSON)?\s*(.*?)```", re.DOTALL)


def parse_json_payload(text: str, expected_fields: Optional[Iterable[str]] = None) -> Any:
    """Extract the first JSON value from an LLM answer.

    Code fences and leading prose are ignored. When expected_fields is given
    the value must be an object containing all of them.
    """
    fenced = _FENCE.search(text)
    candidate = fenced.group(1) if fenced else text
    decoder = json.JSONDecoder()
    payload = None
    for source in (candidate, text):
        for match in re.finditer(r"[\[{]", source):
            try:
                payload, _ = decoder.raw_decode(source, match.start())
                break
            except json.JSONDecodeError:
                continue
        if payload is not None:
            break
    if payload is None:
        raise PayloadParseError("no JSON value found in response")

    if expected_fields is not None:
        if not isinstance(payload, dict):
            raise PayloadParseError("expected a JSON object", missing=expected_fields)
        missing = [f for f in expected_fields if f not in payload]
        if missing:
            raise PayloadParseError("JSON object lacks required fields", missing=missing)
    return payload


REPAIR_INSTRUCTION = (
    "Your previous answer could not be used ({reason}). "
    "Respond again with only the JSON payload in exactly the format shown in the examples."
)


def request_structured(client: LlmClient, request: ChatRequest, parse_fn: Callable[[str], T]) -> T:
    """Complete a request and parse it, with one repair retry on a bad payload.

    parse_fn may raise PayloadParseError or a pydantic ValidationError; the
    second failure is raised as PayloadParseError.
    """
    answer = client.complete(request)
    try:
        return parse_fn(answer)
    except (PayloadParseError, ValidationError) as e:
        reason = _reason(e)
        logger.debug(f"Repairing {request.purpose} answer: {reason}")

    repair = request.model_copy(
        update={
            "purpose": f"{request.purpose}:repair",
            "messages": request.messages
            + [
                ChatMessage(role="assistant", content=answer),
                ChatMessage(role="user", content=REPAIR_INSTRUCTION.format(reason=reason)),
            ],
        }
    )
    answer = client.complete(repair)
    try:
        return parse_fn(answer)
    except (PayloadParseError, ValidationError) as e:
        raise PayloadParseError(f"{request.purpose} payload still invalid after repair: {_reason(e)}") from e


def structured_many(
    client: LlmClient, requests: Sequence[ChatRequest], parse_fn: Callable[[str], T]
) -> List[Union[T, Exception]]:
    """request_structured over many requests with the client's parallelism bound.

    Payload and request failures are returned in place of results, in input
    order; configuration errors such as a replay miss propagate.
    """

    def run(request):
        try:
            return request_structured(client, request, parse_fn)
        except (PayloadParseError, LlmRequestError) as e:
            return e

    if not requests:
        return []
    with ThreadPoolExecutor(max_workers=client.endpoint.parallelism) as pool:
        return list(pool.map(run, requests))


def _reason(error: Exception) -> str:
    if isinstance(error, ValidationError):
        first = error.errors()[0]
        return f"invalid value for {'.'.join(str(p) for p in first['loc'])}: {first['msg']}"
    return str(error)
