"""Dense embedding correspondence between 3D volumes.

The top level re-exports the matching entry points and the loss and metric
functions most callers need; phantoms and the toy embedder live in their own
modules.
"""

from .fixedpoint import MatchResult, MatcherConfig, match
from .losses import LabeledBatch, PairBatch, infonce_loss, prototypical_supcon_loss
from .metrics import EvalRecord, cpm, med, summarize
from .similarity import SearchRegion, nn_match, similarity_map
from .volume import EmbeddingVolume, LabelVolume, PhysPoint, VoxelPoint, concat_unified, normalize

__all__ = [
    "EmbeddingVolume",
    "EvalRecord",
    "LabelVolume",
    "LabeledBatch",
    "MatchResult",
    "MatcherConfig",
    "PairBatch",
    "PhysPoint",
    "SearchRegion",
    "VoxelPoint",
    "concat_unified",
    "cpm",
    "infonce_loss",
    "match",
    "med",
    "nn_match",
    "normalize",
    "prototypical_supcon_loss",
    "similarity_map",
    "summarize",
]

__version__ = "0.1.0"
