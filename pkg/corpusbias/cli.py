# Command Line Module
# argparse surface over the pipeline stages, word-list tooling and the SOCT probe

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd
from loguru import logger
from pydantic import ValidationError

from .charts import ChartCreator
from .config import (
    CdaMode,
    DataPaths,
    EndpointConfig,
    PipelineConfig,
    PipelineDefaults,
    TranscriptMode,
    configure_logging,
    load_pipeline_config,
    validate_config_files,
)
from .corpus import load_corpus
from .exceptions import ConfigError, CorpusBiasError
from .llm import LlmClient, Transcript
from .models import AttributeSpec, GenerationParams, SelectionMode, WordList
from .pipeline import Artifacts, Pipeline
from .repbias import convergence_length
from .soct import SoctConfig, load_templates, probe
from .wordlist import (
    compute_frequencies,
    expand_completeness,
    filter_and_select,
    frequency_table,
    generate_raw,
    load_wordlist,
    load_wordlists,
    review_interactive,
    save_wordlist,
)


def _load_config(args) -> PipelineConfig:
    if not args.config:
        raise ConfigError("this command needs --config")
    config = load_pipeline_config(args.config)
    if args.seed is not None:
        config.cda.rng_seed = args.seed
    if args.transcript is not None:
        config.transcript.mode = TranscriptMode(args.transcript)
    if getattr(args, "mode", None):
        config.cda.mode = CdaMode(args.mode)
    validate_config_files(config)
    return config


def _endpoint(args, name: str, **defaults) -> EndpointConfig:
    if args.config:
        return getattr(load_pipeline_config(args.config).endpoints, name)
    return EndpointConfig(**defaults)


def _standalone_client(args, endpoint: EndpointConfig, out_dir: Path) -> LlmClient:
    path = Path(args.transcript_path) if args.transcript_path else out_dir / Artifacts.TRANSCRIPT
    mode = TranscriptMode(args.transcript or TranscriptMode.RECORD)
    if mode == TranscriptMode.REPLAY and not path.is_file():
        raise ConfigError(f"replay mode needs an existing transcript: {path}")
    return LlmClient(endpoint, Transcript(path, mode))


# Word lists


def cmd_wordlist_gen(args):
    spec = AttributeSpec(attribute=args.attribute, groups=args.groups)
    params = GenerationParams(runs=args.runs, words_per_run=args.words_per_run, validation_count=args.count)
    out_dir = Path(args.out)
    client = _standalone_client(args, _endpoint(args, "generation"), out_dir)
    raw = generate_raw(spec, params, client)
    lists = {g: WordList(attribute=spec.attribute, group=g, entries=raw[g]) for g in spec.groups}
    if not args.no_completeness:
        completeness = _standalone_client(args, _endpoint(args, "completeness"), out_dir)
        lists = expand_completeness(lists, spec, completeness)
    for group, wordlist in lists.items():
        path = out_dir / f"{group}.json"
        save_wordlist(wordlist, path)
        logger.info(f"{len(wordlist.entries)} words for {group} -> {path}")


def cmd_wordlist_freq(args):
    spec = AttributeSpec(attribute=args.attribute, groups=args.groups)
    lists = load_wordlists(args.lists, spec)
    corpus = load_corpus(args.corpus)
    freqs = compute_frequencies([w for wl in lists for w in wl.entries], corpus)
    print(frequency_table(lists, freqs).to_string(index=False))
    if args.out:
        params = GenerationParams(
            runs=1,
            words_per_run=max(args.count, max(len(wl.entries) for wl in lists)),
            validation_count=args.count,
            selection_mode=SelectionMode(args.selection),
        )
        for wl in lists:
            selected = filter_and_select(wl, freqs, params)
            save_wordlist(selected, Path(args.out) / f"{wl.group}.json")
            logger.info(f"Kept {len(selected.entries)} of {len(wl.entries)} words for {wl.group}")


def cmd_wordlist_review(args):
    wordlist = load_wordlist(args.list)
    reviewed = review_interactive(wordlist, decisions_path=args.decisions, audit_path=args.audit)
    save_wordlist(reviewed, args.out or args.list)
    logger.info(f"Review kept {len(reviewed.entries)} of {len(wordlist.entries)} words")


# Pipeline stages


def _run_stages(args, stages: List[str]):
    pipeline = Pipeline(_load_config(args))
    entities = None
    for stage in stages:
        entities = pipeline.run_stage(stage, entities)
    pipeline.write_manifest()
    return pipeline


def cmd_scan(args):
    pipeline = _run_stages(args, ["segment", "match"])
    report = json.loads((pipeline.output_dir / Artifacts.BIAS_BEFORE).read_text(encoding="utf-8"))
    print(f"{report['attribute']}: DR {report['dr']:.4f} (max {report['dr_max']:.4f}) counts {report['counts']['counts']}")


def cmd_stereotype(args):
    stage = {"detect": "detect", "assess": "assess", "filter": "score_filter"}[args.step]
    _run_stages(args, [stage])


def cmd_cda(args):
    pipeline = _run_stages(args, ["cda"])
    report = json.loads((pipeline.output_dir / Artifacts.CDA_REPORT).read_text(encoding="utf-8"))
    print(f"{report['substituted']} of {report['eligible']} eligible sentences substituted; "
          f"DR {report['dr_before']:.4f} -> {report['dr_after']:.4f}")


def cmd_build(args):
    _run_stages(args, ["build"])


def _print_summary(output_dir: Path):
    print((output_dir / Artifacts.SUMMARY_TXT).read_text(encoding="utf-8"))
    manifest_path = output_dir / Artifacts.MANIFEST
    if manifest_path.is_file():
        timings = json.loads(manifest_path.read_text(encoding="utf-8")).get("timings", {})
        if timings:
            print(pd.Series(timings, name="seconds").to_string())


def cmd_report(args):
    pipeline = _run_stages(args, ["report"])
    _print_summary(pipeline.output_dir)
    if args.chart:
        series = pd.read_csv(pipeline.output_dir / Artifacts.CUMULATIVE_DR)
        attribute = pipeline.config.attribute.attribute
        fig = ChartCreator.cumulative_dr_figure({attribute: series}, {attribute: convergence_length(series)})
        if fig is not None:
            ChartCreator.save(fig, args.chart)


def cmd_run(args):
    pipeline = Pipeline(_load_config(args))
    pipeline.run(resume=args.resume)
    _print_summary(pipeline.output_dir)


# SOCT


def cmd_soct(args):
    out = Path(args.out)
    templates = load_templates(args.templates) if args.templates else load_templates()
    config = SoctConfig(templates=templates, runs_per_template=args.runs)
    endpoint = _endpoint(args, "probe", max_output_tokens=30)
    client = _standalone_client(args, endpoint, out.parent)
    lists = load_wordlists(args.lists, AttributeSpec(attribute="gender", groups=PipelineDefaults.ATTRIBUTES["gender"]))
    result = probe(config, client, lists)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for name, half in result.halves.items():
        print(f"{name}: DR {half.dr:.4f} ({half.direction})")
    if args.chart:
        fig = ChartCreator.soct_figure(pd.DataFrame(result.per_template))
        if fig is not None:
            ChartCreator.save(fig, args.chart)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corpusbias", description="Detect and mitigate bias in text corpora")
    parser.add_argument("--config", help="pipeline config file (JSON)")
    parser.add_argument("--seed", type=int, help="override the CDA random seed")
    parser.add_argument(
        "--transcript", choices=[m.value for m in TranscriptMode], help="LLM transcript mode"
    )
    parser.add_argument("--transcript-path", help="transcript file for word-list and SOCT commands")
    parser.add_argument("--log-level", help="loguru level (default from CORPUSBIAS_LOG_LEVEL)")
    commands = parser.add_subparsers(dest="command", required=True)

    wordlist = commands.add_parser("wordlist", help="generate, filter and review word lists")
    wl_commands = wordlist.add_subparsers(dest="wordlist_command", required=True)

    gen = wl_commands.add_parser("gen", help="generate raw word lists with an LLM")
    gen.add_argument("--attribute", required=True)
    gen.add_argument("--groups", nargs="+", required=True)
    gen.add_argument("--runs", type=int, default=5)
    gen.add_argument("--words-per-run", type=int, default=300)
    gen.add_argument("--count", type=int, default=100, help="words to keep after filtering")
    gen.add_argument("--no-completeness", action="store_true", help="skip plural/counterpart expansion")
    gen.add_argument("--out", required=True, help="output directory for <group>.json")
    gen.set_defaults(func=cmd_wordlist_gen)

    freq = wl_commands.add_parser("freq", help="corpus frequencies and top-k selection")
    freq.add_argument("--attribute", required=True)
    freq.add_argument("--groups", nargs="+", required=True)
    freq.add_argument("--lists", required=True, help="directory with <group>.json")
    freq.add_argument("--corpus", required=True)
    freq.add_argument("--count", type=int, default=100)
    freq.add_argument("--selection", choices=[m.value for m in SelectionMode], default=SelectionMode.FREQUENCY.value)
    freq.add_argument("--out", help="write the selected lists to this directory")
    freq.set_defaults(func=cmd_wordlist_freq)

    review = wl_commands.add_parser("review", help="validate a word list against the quality criteria")
    review.add_argument("--list", required=True)
    review.add_argument("--decisions", help="JSONL decisions file for non-interactive review")
    review.add_argument("--audit", required=True, help="JSONL audit trail")
    review.add_argument("--out", help="reviewed list (default: overwrite --list)")
    review.set_defaults(func=cmd_wordlist_review)

    commands.add_parser("scan", help="segment the corpus and report representation bias").set_defaults(func=cmd_scan)

    stereotype = commands.add_parser("stereotype", help="stereotype detection, assessment and filtering")
    stereotype.add_argument("step", choices=["detect", "assess", "filter"])
    stereotype.set_defaults(func=cmd_stereotype)

    cda = commands.add_parser("cda", help="counterfactual data augmentation")
    cda.add_argument("--mode", choices=[m.value for m in CdaMode])
    cda.set_defaults(func=cmd_cda)

    commands.add_parser("build", help="write the debiased corpus").set_defaults(func=cmd_build)

    report = commands.add_parser("report", help="final DR report and summary table")
    report.add_argument("--chart", help="write the cumulative DR chart to this HTML file")
    report.set_defaults(func=cmd_report)

    soct = commands.add_parser("soct", help="occupation completion probe of a chat endpoint")
    soct.add_argument("--runs", type=int, default=100)
    soct.add_argument("--templates", help="template file (one per line, female-associated half first)")
    soct.add_argument("--lists", default=str(DataPaths.WORDLISTS / "gender"), help="gender word-list directory")
    soct.add_argument("--out", default="soct.json")
    soct.add_argument("--chart", help="write per-template counts to this HTML file")
    soct.set_defaults(func=cmd_soct)

    run = commands.add_parser("run", help="run the whole pipeline")
    run.add_argument("--resume", action="store_true", help="skip stages already stamped in the metadata store")
    run.add_argument("--mode", choices=[m.value for m in CdaMode], help="override the CDA mode")
    run.set_defaults(func=cmd_run)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(level=args.log_level)
    try:
        args.func(args)
    except CorpusBiasError as e:
        logger.error(str(e))
        return 1
    except ValidationError as e:
        logger.error(f"invalid arguments: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
