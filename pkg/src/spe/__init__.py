"""Sentence-pair scoring with LSTM language models trained by sentence-level noise-contrastive estimation."""

__version__ = "0.1.0"
