"""Chunked retrieval-augmented language modeling workbench."""

from . import analytics, bm25_index, corpus, dense_index, retrieval, retro_lm, synth

__version__ = "0.1.0"

__all__ = [
    "analytics",
    "bm25_index",
    "corpus",
    "dense_index",
    "retrieval",
    "retro_lm",
    "synth",
    "__version__",
]
