"""Two-stage transducer fine-tuning for a tonal language, with a synthetic test bed."""

__version__ = "0.1.0"
