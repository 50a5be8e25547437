"""Audio-visual target speaker extraction conditioned on speech-lip synchronization."""

from .estimators import SyncDetector, TargetSpeakerExtractor
from .reentry import ReentryConfig, ReentryModel
from .slsyn import SLSyn, SLSynConfig

__version__ = "0.1.0"

__all__ = [
    "ReentryConfig",
    "ReentryModel",
    "SLSyn",
    "SLSynConfig",
    "SyncDetector",
    "TargetSpeakerExtractor",
    "__version__",
]
