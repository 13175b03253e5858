"""Semantic-ID recommendation pipeline.

Tokenize item vectors into long unordered semantic IDs with optimized
product quantization, train a sequence model with a multi-token
prediction loss, and serve top-K recommendations via cached per-digit
logits and graph-constrained decoding whose cost is independent of the
catalog size.
"""

from .core import (
    ConfigurationError,
    ContractViolation,
    DataError,
    InteractionDataset,
    ItemCatalog,
    SemanticID,
    SemanticScheme,
    SidrecError,
    StalenessError,
    token_global_index,
    validate_semantic_id,
)

__all__ = [
    "ConfigurationError",
    "ContractViolation",
    "DataError",
    "InteractionDataset",
    "ItemCatalog",
    "SemanticID",
    "SemanticScheme",
    "SidrecError",
    "StalenessError",
    "token_global_index",
    "validate_semantic_id",
]

__version__ = "0.1.0"
