"""Looped transformers with hyper-connections: models, training, quantization and analysis in numpy."""

__version__ = "0.1.0"
