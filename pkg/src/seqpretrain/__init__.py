"""Two-stage (acoustic + linguistic) pre-training for speech seq2seq models."""

__version__ = "0.1.0"
