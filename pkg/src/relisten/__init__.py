"""Session-based music recommendation that models repeated listening."""
from relisten.config import ConfigError, RunConfig, load_config
from relisten.dataio import ListeningEvent, Session, SessionSequence, SongCatalog
from relisten.dataset import Dataset, build_dataset, load_bundle, save_bundle

__all__ = [
    "ConfigError",
    "Dataset",
    "ListeningEvent",
    "RunConfig",
    "Session",
    "SessionSequence",
    "SongCatalog",
    "build_dataset",
    "load_bundle",
    "load_config",
    "save_bundle",
]
__version__ = "0.1.0"
