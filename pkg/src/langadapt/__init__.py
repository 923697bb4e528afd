"""Desk-scale QLoRA fine-tuning, preference optimization and language adaptation.

The package trains a small LLaMA-style decoder from scratch in numpy and
walks it through the staged recipe used to adapt an English instruction
model to Italian: supervised fine-tuning with low-rank adapters over a 4-bit
base, direct preference optimization, then continued training on
target-language text. An evaluation harness scores checkpoints on
multiple-choice and generative tasks.
"""

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    IntegrityError,
    LangAdaptError,
    LengthError,
    NumericError,
    OrderingError,
    SchemaError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "FormatError",
    "IntegrityError",
    "LangAdaptError",
    "LengthError",
    "NumericError",
    "OrderingError",
    "SchemaError",
    "ValidationError",
]
