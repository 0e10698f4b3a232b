"""LSTM acoustic models with CTC, frame stacking and beam decoding."""

__version__ = "0.1.0"
