"""Uncertainty-aware map vectorization on synthetic scenes.

The two estimators most users need are re-exported here: ``MapVectorizer``
(the full BEV decoder pipeline) and ``PVDetector`` (the frozen
perspective-view teacher).  Everything else lives in its topical module:
``scenes`` for data, ``metrics`` for scoring, ``diffcore`` for autodiff.
"""

from .geometry import CameraModel, Polyline2D, make_camera
from .metrics import APResult, chamfer_distance, map_metric
from .pipeline import MapVectorizer, PVDetector, RunConfig
from .scenes import (
    GenerationConfig,
    Scene,
    generate_dataset,
    rasterize_features,
    split_geo,
)

__version__ = "0.1.0"

__all__ = [
    "APResult",
    "CameraModel",
    "GenerationConfig",
    "MapVectorizer",
    "PVDetector",
    "Polyline2D",
    "RunConfig",
    "Scene",
    "chamfer_distance",
    "generate_dataset",
    "make_camera",
    "map_metric",
    "rasterize_features",
    "split_geo",
    "__version__",
]
