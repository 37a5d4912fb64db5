"""Desk-scale biomedical retrieval workbench.

First-stage retrieval over title/abstract corpora: lexical BM25, multi-vector
dense retrieval with max-similarity inference, hybrid score fusion, generators
for pre-training and template-based question pairs, and MAP/recall evaluation.
Everything runs on a laptop with pluggable embeddings.
"""

__version__ = "0.1.0"


class BioIRError(Exception):
    """Base class for workbench errors."""


class ConfigError(BioIRError):
    """Bad configuration: unknown option, out-of-range parameter, missing path."""


class DataError(BioIRError):
    """Bad data: malformed input line, failed validation, inconsistent files."""


class StageError(BioIRError):
    """A pipeline stage failed. Carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
