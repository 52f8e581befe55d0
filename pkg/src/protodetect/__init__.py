"""Three-stage unsupervised time-series anomaly detection.

Stage 1 pretrains a window reconstruction model on normal data. Stage 2
steers that model's loss into a target band with a small RL controller,
harvesting boundary pseudo-anomalies along the way, then trains a triplet
encoder on (anchor, augmented view, pseudo-negative) triples. Stage 3
refines a bank of learnable prototypes jointly with the encoder; the
anomaly score of a window is the squared distance from its embedding to
the nearest prototype.
"""

__version__ = "0.1.0"

from .data import (
    AnomalySpec,
    CsvSchema,
    NormStats,
    TimeSeries,
    WindowSet,
    augment_light,
    denormalize,
    generate_synthetic,
    load_csv,
    make_windows,
    normalize,
)
from .scoring import EvalReport, ScoreSeries

__all__ = [
    "AnomalySpec",
    "CsvSchema",
    "NormStats",
    "TimeSeries",
    "WindowSet",
    "augment_light",
    "denormalize",
    "generate_synthetic",
    "load_csv",
    "make_windows",
    "normalize",
    "EvalReport",
    "ScoreSeries",
    "__version__",
]
