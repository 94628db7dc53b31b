"""Time-aware document embeddings and event detection for news streams."""

from .corpus import Corpus, Document, EntitySpan, Granularity, load_corpus, sort_chronological, timestep
from .fusion import FusionModel, fuse, load_model, save_model
from .time_encoding import TimeEncoder, TimeEncoderConfig, probe_similarity, sinpe

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "Document",
    "EntitySpan",
    "Granularity",
    "FusionModel",
    "TimeEncoder",
    "TimeEncoderConfig",
    "fuse",
    "load_corpus",
    "load_model",
    "probe_similarity",
    "save_model",
    "sinpe",
    "sort_chronological",
    "timestep",
]
