# Package initialization file
# Public components of the corpus bias detection and mitigation toolkit

from .config import PipelineConfig, PipelineDefaults, Settings, configure_logging, load_pipeline_config, settings
from .exceptions import CorpusBiasError
from .models import AttributeSpec, Document, GroupCounts, MetadataRecord, SentenceEntity, WordList
from .corpus import MetadataStore, build_debiased, load_corpus, segment, segment_corpus
from .repbias import Matcher, Tokenizer, compute_dr, cumulative_dr, emit_report
from .llm import LlmClient, Transcript
from .stereotype import assess_all, detect_all, filter_stereotypes, score
from .cda import plan_targets, run_cda
from .soct import SoctConfig, probe
from .charts import ChartCreator
from .pipeline import Pipeline, report_summary, run_pipeline

__all__ = [
    'PipelineConfig',
    'PipelineDefaults',
    'Settings',
    'configure_logging',
    'load_pipeline_config',
    'settings',
    'CorpusBiasError',
    'AttributeSpec',
    'Document',
    'GroupCounts',
    'MetadataRecord',
    'SentenceEntity',
    'WordList',
    'MetadataStore',
    'build_debiased',
    'load_corpus',
    'segment',
    'segment_corpus',
    'Matcher',
    'Tokenizer',
    'compute_dr',
    'cumulative_dr',
    'emit_report',
    'LlmClient',
    'Transcript',
    'assess_all',
    'detect_all',
    'filter_stereotypes',
    'score',
    'plan_targets',
    'run_cda',
    'SoctConfig',
    'probe',
    'ChartCreator',
    'Pipeline',
    'report_summary',
    'run_pipeline',
]

__version__ = '1.0.0'
__author__ = 'Corpus Bias Toolkit Team'
__description__ = 'Representation bias, stereotype and counterfactual augmentation toolkit for text corpora'
