# Configuration and Constants
# Environment settings, shipped data paths, pipeline defaults and the
# structured pipeline config file.

import json
import sys
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv
from loguru import logger
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import ConfigError
from .models import AttributeSpec

# Load environment variables
load_dotenv()


class Settings(BaseSettings):
    """Process-level settings read from the environment / .env"""

    LOG_LEVEL: str = "INFO"
    LOG_DIR: Optional[str] = None
    DEFAULT_API_KEY_ENV: str = "OPENAI_API_KEY"
    SHOW_PROGRESS: bool = True

    model_config = SettingsConfigDict(env_prefix="CORPUSBIAS_", env_file=".env", extra="ignore")


settings = Settings()


def configure_logging(app_settings: Optional[Settings] = None, level: Optional[str] = None):
    """Route loguru output to stderr and, when LOG_DIR is set, to a rotating file"""
    app_settings = app_settings or settings
    logger.remove()
    logger.add(sys.stderr, level=level or app_settings.LOG_LEVEL)
    target = app_settings.LOG_DIR
    if target:
        logger.add(
            str(Path(target) / "corpusbias_{time}.log"),
            level="DEBUG",
            rotation="1 day",
            retention="30 days",
        )


# Shipped data files
class DataPaths:
    ROOT = Path(__file__).resolve().parent / "data"
    ABBREVIATIONS = ROOT / "abbreviations.txt"
    POLITICAL_KEYWORDS = ROOT / "precheck_political.txt"
    HISTORICAL_KEYWORDS = ROOT / "precheck_historical.txt"
    SOCT_TEMPLATES = ROOT / "soct_templates.txt"
    SCORE_MODEL = ROOT / "score_model.json"
    WORDLISTS = ROOT / "wordlists"
    FEW_SHOTS = ROOT / "few_shots"


# Chart Configuration
class ChartConfig:
    COLORS = {
        "background": "#000000",
        "grid": "#38383a",
        "text": "#ffffff",
        "series": ["#007aff", "#30d158", "#ff9f0a", "#ff453a", "#bf5af2"],
    }
    HEIGHT = 500


class PipelineDefaults:
    STEREOTYPE_THRESHOLD = 0.63
    MAX_SENTENCE_TOKENS = 47
    SUBSTITUTION_PROBABILITY = 0.5
    LLM_SELECTION_RATIO = 0.8
    SOCT_RUNS_PER_TEMPLATE = 100
    SOCT_MAX_FAILURE_RATE = 0.10
    DETECTION_TEMPERATURE = 0.0
    CONVERGENCE_TOLERANCE = 1e-5

    ATTRIBUTES = {
        "gender": ["female", "male"],
        "age": ["young", "middle", "old"],
        "religion": ["buddhism", "christianity", "hinduism", "islam", "judaism"],
    }


class TranscriptMode(str, Enum):
    RECORD = "record"
    REPLAY = "replay"
    LIVE = "live"


class EndpointConfig(BaseModel):
    """One chat-completions endpoint (hosted or local, OpenAI-compatible wire format)"""

    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4.1"
    timeout: float = 60.0
    retries: int = Field(default=3, ge=1)
    parallelism: int = Field(default=4, ge=1)
    temperature: Optional[float] = Field(default=None, ge=0.0)
    max_output_tokens: Optional[int] = Field(default=None, ge=1)
    api_key_env: str = Field(default_factory=lambda: settings.DEFAULT_API_KEY_ENV)


class EndpointSet(BaseModel):
    """Per-stage endpoints; stages may point at different models"""

    generation: EndpointConfig = Field(default_factory=EndpointConfig)
    completeness: EndpointConfig = Field(default_factory=EndpointConfig)
    detection: EndpointConfig = Field(
        default_factory=lambda: EndpointConfig(model="qwen2.5-7b-instruct", temperature=0.0)
    )
    assessment: EndpointConfig = Field(
        default_factory=lambda: EndpointConfig(model="llama-3.3-70b-instruct", temperature=0.0)
    )
    selection: EndpointConfig = Field(default_factory=EndpointConfig)
    verification: EndpointConfig = Field(default_factory=EndpointConfig)
    probe: EndpointConfig = Field(default_factory=lambda: EndpointConfig(max_output_tokens=30))


class TranscriptConfig(BaseModel):
    mode: TranscriptMode = TranscriptMode.LIVE
    path: Optional[Path] = None


class StereotypeConfig(BaseModel):
    threshold: float = Field(default=PipelineDefaults.STEREOTYPE_THRESHOLD, ge=0.0, le=1.0)
    max_tokens: int = Field(default=PipelineDefaults.MAX_SENTENCE_TOKENS, ge=1)
    score_model_path: Path = DataPaths.SCORE_MODEL


class CdaMode(str, Enum):
    BASE = "base"
    GC = "gc"


class CdaConfig(BaseModel):
    mode: CdaMode = CdaMode.GC
    substitution_probability: float = Field(default=PipelineDefaults.SUBSTITUTION_PROBABILITY, ge=0.0, le=1.0)
    llm_selection_ratio: float = Field(default=PipelineDefaults.LLM_SELECTION_RATIO, ge=0.0, le=1.0)
    rng_seed: int = 0
    target_epsilon: float = Field(default=0.0, ge=0.0)


class PrecheckPaths(BaseModel):
    political: Path = DataPaths.POLITICAL_KEYWORDS
    historical: Path = DataPaths.HISTORICAL_KEYWORDS


class PipelineConfig(BaseModel):
    """The single structured config file driving `run` and the stage subcommands"""

    corpus: Path
    attribute: AttributeSpec
    wordlist_dir: Path
    output_dir: Path = Path("runs/latest")
    stereotype: StereotypeConfig = Field(default_factory=StereotypeConfig)
    cda: CdaConfig = Field(default_factory=CdaConfig)
    endpoints: EndpointSet = Field(default_factory=EndpointSet)
    transcript: TranscriptConfig = Field(default_factory=TranscriptConfig)
    in_memory: bool = False
    abbreviations_path: Path = DataPaths.ABBREVIATIONS
    precheck: PrecheckPaths = Field(default_factory=PrecheckPaths)
    population_rates: Optional[Dict[str, float]] = None
    workers: int = Field(default=1, ge=1)

    @field_validator("population_rates")
    @classmethod
    def _rates_are_distribution(cls, value):
        if value is None:
            return value
        if any(rate < 0 for rate in value.values()) or abs(sum(value.values()) - 1.0) > 1e-9:
            raise ValueError("population_rates must be non-negative and sum to 1")
        return value

    @model_validator(mode="after")
    def _rates_cover_groups(self):
        if self.population_rates is not None and set(self.population_rates) != set(self.attribute.groups):
            raise ValueError("population_rates must name exactly the attribute groups")
        return self

    def referenced_files(self) -> List[Path]:
        files = [
            self.corpus,
            self.stereotype.score_model_path,
            self.abbreviations_path,
            self.precheck.political,
            self.precheck.historical,
        ]
        files.extend(self.wordlist_dir / f"{group}.json" for group in self.attribute.groups)
        return files


def load_pipeline_config(path, **overrides) -> PipelineConfig:
    """Read and validate a pipeline config file.

    Relative paths inside the file are resolved against the file's directory.
    Every referenced file must exist; nothing is processed otherwise.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e

    raw.update({key: value for key, value in overrides.items() if value is not None})
    try:
        config = PipelineConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e

    config = _resolve_relative(config, path.parent)
    validate_config_files(config)
    return config


def _resolve_relative(config: PipelineConfig, base: Path) -> PipelineConfig:
    def fix(p: Optional[Path]) -> Optional[Path]:
        if p is None or p.is_absolute():
            return p
        return base / p

    config.corpus = fix(config.corpus)
    config.wordlist_dir = fix(config.wordlist_dir)
    config.output_dir = fix(config.output_dir)
    config.stereotype.score_model_path = fix(config.stereotype.score_model_path)
    config.abbreviations_path = fix(config.abbreviations_path)
    config.precheck.political = fix(config.precheck.political)
    config.precheck.historical = fix(config.precheck.historical)
    config.transcript.path = fix(config.transcript.path)
    return config


def validate_config_files(config: PipelineConfig):
    missing = [str(p) for p in config.referenced_files() if not Path(p).is_file()]
    if missing:
        raise ConfigError("missing files referenced by config: " + ", ".join(missing))
    if config.transcript.mode == TranscriptMode.REPLAY:
        transcript = config.transcript.path or config.output_dir / "transcript.jsonl"
        if not Path(transcript).is_file():
            raise ConfigError(f"replay mode needs an existing transcript: {transcript}")
