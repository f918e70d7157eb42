"""Leap-LSTM: an LSTM text classifier that learns which words it can skip."""

from .data import Document, Vocabulary, build_vocab, tokenize
from .model import LeapConfig, LeapLSTM
from .training import ScheduleConfig, TrainConfig, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "Document", "Vocabulary", "build_vocab", "tokenize",
    "LeapConfig", "LeapLSTM",
    "ScheduleConfig", "TrainConfig", "evaluate", "fit",
]
