"""CNN-encoder / LSTM-decoder image captioning on a from-scratch autodiff core."""

__version__ = "0.1.0"
