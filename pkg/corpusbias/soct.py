# SOCT Module
# Occupation completion probe: sample completions for gender-stereotyped
# occupation templates and measure DR over the gendered completions.

from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

from loguru import logger
from pydantic import BaseModel, Field, field_validator

from .config import DataPaths, PipelineDefaults
from .exceptions import ConfigError, SoctProbeError
from .llm import LlmClient
from .models import GroupCounts, WordList
from .prompts import PromptTemplate
from .repbias import Matcher, compute_dr, dr_max

Classification = Literal["female", "male", "neutral"]

NEUTRAL = "neutral"


def load_templates(path=None) -> List[str]:
    path = Path(path or DataPaths.SOCT_TEMPLATES)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read SOCT templates {path}: {e}") from e
    return [line.strip() for line in lines if line.strip() and not line.lstrip().startswith("#")]


class SoctConfig(BaseModel):
    """Templates are ordered: first half female-associated, second half male-associated"""

    templates: List[str] = Field(default_factory=load_templates)
    runs_per_template: int = Field(default=PipelineDefaults.SOCT_RUNS_PER_TEMPLATE, ge=1)
    max_output_tokens: Optional[int] = Field(default=None, ge=1)
    max_failure_rate: float = Field(default=PipelineDefaults.SOCT_MAX_FAILURE_RATE, ge=0.0, le=1.0)

    @field_validator("templates")
    @classmethod
    def _even_templates(cls, templates):
        if len(templates) < 2 or len(templates) % 2:
            raise ValueError("SOCT needs an even, non-zero number of templates")
        return templates

    @property
    def midpoint(self) -> int:
        return len(self.templates) // 2

    def half_of(self, template_index: int) -> str:
        return "female_stereotyped" if template_index < self.midpoint else "male_stereotyped"


def run_probe(config: SoctConfig, client: LlmClient) -> List[Tuple[int, str]]:
    """Collect runs_per_template independent completions per template.

    Failed requests are dropped and logged; more than max_failure_rate
    failures abort the probe.
    """
    requests, indices = [], []
    for index, template in enumerate(config.templates):
        for run in range(config.runs_per_template):
            requests.append(
                client.build_request(
                    "occupation_probe",
                    PromptTemplate.occupation_probe(template),
                    tag=f"{index}/run-{run}",
                    max_output_tokens=config.max_output_tokens,
                )
            )
            indices.append(index)

    logger.info(f"Probing {len(config.templates)} templates x {config.runs_per_template} runs")
    results = client.complete_many(requests, return_exceptions=True)

    completions, failures = [], 0
    for index, result in zip(indices, results):
        if isinstance(result, Exception):
            failures += 1
            logger.warning(f"Probe request for template {index} failed: {result}")
            continue
        completions.append((index, result))

    rate = failures / len(requests)
    if rate > config.max_failure_rate:
        raise SoctProbeError(f"{failures} of {len(requests)} probe requests failed ({rate:.1%})")
    return completions


def classify(completion: str, matcher: Matcher) -> Classification:
    """female or male iff only that list matched; neutral for none or both"""
    counts = matcher.count(completion)
    hit = {group for group, n in counts.items() if n}
    if hit == {"female"}:
        return "female"
    if hit == {"male"}:
        return "male"
    return NEUTRAL


def gender_matcher(lists: Sequence[WordList]) -> Matcher:
    groups = {wl.group for wl in lists}
    if groups != {"female", "male"}:
        raise ConfigError(f"SOCT classification needs female and male word lists, got {sorted(groups)}")
    return Matcher(lists)


class SoctHalf(BaseModel):
    counts: GroupCounts
    dr: float
    direction: Literal["f", "m", "balanced"]
    no_observations: bool = False
    unclassified: int = 0


class SoctReport(BaseModel):
    total_completions: int
    unclassified: int
    halves: Dict[str, SoctHalf]
    per_template: List[Dict[str, object]]


def _direction(counts: Dict[str, int]) -> str:
    if counts["female"] == counts["male"]:
        return "balanced"
    return "f" if counts["female"] > counts["male"] else "m"


def report(classifications: Sequence[Tuple[int, Classification]], config: SoctConfig) -> SoctReport:
    """Per-half DR over gendered completions; neutral completions are counted apart"""
    per_template = [{"female": 0, "male": 0, NEUTRAL: 0} for _ in config.templates]
    for index, label in classifications:
        per_template[index][label] += 1

    halves = {}
    for name, rows in (
        ("female_stereotyped", per_template[: config.midpoint]),
        ("male_stereotyped", per_template[config.midpoint :]),
    ):
        counts = {group: sum(row[group] for row in rows) for group in ("female", "male")}
        group_counts = GroupCounts(attribute="gender", counts=counts, relevant_sentences=sum(counts.values()))
        no_obs = group_counts.total == 0
        halves[name] = SoctHalf(
            counts=group_counts,
            dr=dr_max(counts) if no_obs else compute_dr(counts),
            direction=_direction(counts),
            no_observations=no_obs,
            unclassified=sum(row[NEUTRAL] for row in rows),
        )
        if no_obs:
            logger.warning(f"No gendered completions in the {name} half")

    unclassified = sum(row[NEUTRAL] for row in per_template)
    return SoctReport(
        total_completions=len(classifications),
        unclassified=unclassified,
        halves=halves,
        per_template=[
            {"index": i, "template": config.templates[i], **row} for i, row in enumerate(per_template)
        ],
    )


def probe(config: SoctConfig, client: LlmClient, lists: Sequence[WordList]) -> SoctReport:
    matcher = gender_matcher(lists)
    completions = run_probe(config, client)
    return report([(index, classify(text, matcher)) for index, text in completions], config)
