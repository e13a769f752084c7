"""Curriculum data sampling and random layerwise token dropping for small GPT training."""

from .analyzer import DifficultyIndex, build_index, build_unigram_table, load_index, write_index
from .corpus_io import PackedCorpus, Sample, load_corpus, save_corpus, tokenize_corpus
from .curriculum import CurriculumLoader, CurriculumSchedule, pace
from .ltd_routing import LtdSchedule, effective_tokens, kept_len
from .model import GPT, ModelConfig
from .trainer import LrSchedule, RunConfig, TokenLedger, evaluate, lr_at, train
from .tuner import TuneSpec, binary_search, probe

__version__ = "0.1.0"
