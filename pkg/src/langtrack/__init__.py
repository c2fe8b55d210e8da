"""Language-assisted point tracking at desk scale."""

__version__ = "0.1.0"

from .config import ModelConfig, RunConfig, TrainConfig, load_config
from .model import LanguageTracker, build_model
from .tracks import DatasetRecord, QueryPoint, TrackSet, VideoClip

__all__ = ["ModelConfig", "RunConfig", "TrainConfig", "load_config", "LanguageTracker",
           "build_model", "DatasetRecord", "QueryPoint", "TrackSet", "VideoClip"]
