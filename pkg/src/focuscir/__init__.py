"""Focus-guided composed image retrieval: reference image + modification text -> target image."""
from .data import DatasetManifest, FeatureMatrix, HyperConfig, QueryTriplet, load_config, load_manifest
from .model import FocusComposer, Retriever

__all__ = [
    "DatasetManifest", "FeatureMatrix", "FocusComposer", "HyperConfig", "QueryTriplet", "Retriever",
    "load_config", "load_manifest",
]
__version__ = "0.1.0"
