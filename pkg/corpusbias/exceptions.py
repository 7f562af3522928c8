# Error Types
# Every failure the library raises derives from CorpusBiasError so the CLI can
# catch one type at the boundary.

from typing import Iterable, Optional


class CorpusBiasError(Exception):
    """Base class for all corpusbias errors"""


class ConfigError(CorpusBiasError):
    """Invalid or incomplete pipeline configuration"""


class CorpusFormatError(CorpusBiasError):
    """A corpus line could not be parsed"""

    def __init__(self, path, line: int, reason: str):
        self.path = str(path)
        self.line = line
        self.reason = reason
        super().__init__(f"{self.path}:{line}: {reason}")


class DuplicateDocIdError(CorpusBiasError):
    """Two corpus records share a doc_id"""

    def __init__(self, doc_id: str, line: int):
        self.doc_id = doc_id
        self.line = line
        super().__init__(f"duplicate doc_id {doc_id!r} on line {line}")


class UnknownDocumentError(CorpusBiasError):
    """A sentence entity references a document that is not in the corpus"""

    def __init__(self, doc_id: str):
        self.doc_id = doc_id
        super().__init__(f"sentence entity references unknown doc_id {doc_id!r}")


class StoreCorruptError(CorpusBiasError):
    """A metadata store line could not be parsed"""

    def __init__(self, path, line: int, reason: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"corrupt metadata store {self.path} at line {line}: {reason}")


class MissingCredentialError(CorpusBiasError):
    """The endpoint credential environment variable is not set"""

    def __init__(self, env_var: str):
        self.env_var = env_var
        super().__init__(f"environment variable {env_var} is not set")


class ReplayMissError(CorpusBiasError):
    """Replay mode was asked for a request that is not in the transcript"""

    def __init__(self, key: str):
        self.key = key
        super().__init__(f"no transcript entry for request key {key}")


class LlmRequestError(CorpusBiasError):
    """The endpoint failed after all retries"""


class PayloadParseError(CorpusBiasError):
    """An LLM answer did not contain the expected structured payload"""

    def __init__(self, reason: str, missing: Optional[Iterable[str]] = None):
        self.reason = reason
        self.missing = sorted(missing or [])
        detail = f" (missing: {', '.join(self.missing)})" if self.missing else ""
        super().__init__(f"{reason}{detail}")


class WordListGenerationError(CorpusBiasError):
    """Every generation run for a group failed"""


class SoctProbeError(CorpusBiasError):
    """Too many probe requests failed"""
