"""Desk-scale unified vision-language transformer: pretraining, prompting, decoding and retrieval."""

from .data import Corpus, PairedExample, Vocabulary, default_vocab, generate_corpus
from .encoders import AttentionMaskKind, EncoderConfig, ModelParams, init_params
from .errors import CheckpointError, NumericError, ValidationError
from .tensor import Tensor

__all__ = [
    "AttentionMaskKind", "CheckpointError", "Corpus", "EncoderConfig", "ModelParams", "NumericError",
    "PairedExample", "Tensor", "ValidationError", "Vocabulary", "default_vocab", "generate_corpus", "init_params",
]
__version__ = "0.1.0"
