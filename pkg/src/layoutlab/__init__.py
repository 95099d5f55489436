"""Layout-aware document NER on a desk: encoder, training, evaluation, benchmarks."""

__version__ = "0.1.0"
