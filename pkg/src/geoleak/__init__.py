"""Location-privacy leakage from social ties: a GEO-SN pipeline, a graph
convolutional recurrent model written in numpy, and the evaluation harness
that measures how well non-sharing users can be located."""

from .errors import GeoleakError
from .evaluation import critical_mass_sweep, evaluate, haversine_km
from .geosn import SnapshotSequence, TweetRecord, build_examples, discretize
from .graph import SocialGraph, normalized_laplacian
from .neural import ModelConfig, forward, train
from .synth import SynthConfig, generate

__version__ = "0.1.0"

__all__ = [
    "GeoleakError", "ModelConfig", "SnapshotSequence", "SocialGraph", "SynthConfig", "TweetRecord",
    "build_examples", "critical_mass_sweep", "discretize", "evaluate", "forward", "generate",
    "haversine_km", "normalized_laplacian", "train",
]
