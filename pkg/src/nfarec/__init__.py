"""Negative-feedback-aware recommendation with Hawkes sequence encoding and
feedback-aware hypergraph convolution."""

from .config import Config, PRESETS
from .data import (Bundle, FeedbackGraph, InteractionRecord, Schema, build_feedback_correlation,
                   chronological_split, load_bundle, load_interactions, prepare_bundle, save_bundle)
from .model import NFARec, fit, load_checkpoint, save_checkpoint

__all__ = [
    "Bundle", "Config", "FeedbackGraph", "InteractionRecord", "NFARec", "PRESETS", "Schema",
    "build_feedback_correlation", "chronological_split", "fit", "load_bundle", "load_checkpoint",
    "load_interactions", "prepare_bundle", "save_bundle", "save_checkpoint",
]
