"""Desk-scale OOD detection workbench: train-time feature normalization with
normalization skipped at scoring time, baselines, post-hoc scorers and metrics."""

__version__ = "0.1.0"
