"""Free-text keystroke verification with a Siamese masked LSTM."""

__version__ = "0.1.0"
