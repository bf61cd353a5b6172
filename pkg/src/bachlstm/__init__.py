"""Bach-style music generation with LSTM note and duration models."""

__version__ = "0.1.0"
