"""Window scoring, thresholding, and window-level evaluation metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class ScoreSeries:
    """Anomaly scores aligned to window start indices."""

    scores: np.ndarray  # N
    starts: np.ndarray  # N
    width: int

    def __post_init__(self):
        if self.scores.shape != self.starts.shape:
            raise ValueError("scores and starts must be aligned")

    def __len__(self) -> int:
        return self.scores.shape[0]


@dataclass
class EvalReport:
    """Window-level detection summary at one threshold."""

    auc: float
    tp: int
    tn: int
    fp: int
    fn: int
    predicted_anomalies: int
    threshold: float
    n_windows: int

    def __post_init__(self):
        if self.tp + self.tn + self.fp + self.fn != self.n_windows:
            raise ValueError("confusion counts do not partition the window set")
        if self.predicted_anomalies != self.tp + self.fp:
            raise ValueError("predicted_anomalies must equal tp + fp")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def score_windows(bank, windows) -> ScoreSeries:
    """Score every window: squared distance to the nearest prototype."""
    scores = bank.score_batch(windows.windows)
    return ScoreSeries(scores=scores, starts=windows.starts.copy(), width=windows.width)


def pick_threshold(train_scores: np.ndarray, quantile: float = 0.99) -> float:
    """Empirical quantile (linear interpolation) of training-normal scores."""
    train_scores = np.asarray(train_scores, dtype=np.float64)
    if train_scores.size == 0:
        raise ValueError("cannot pick a threshold from empty scores")
    if not 0.0 < quantile <= 1.0:
        raise ValueError(f"quantile must be in (0, 1], got {quantile}")
    return float(np.quantile(train_scores, quantile))


def classify(scores: np.ndarray, threshold: float) -> np.ndarray:
    """Predicted label is 1 exactly when score >= threshold."""
    return (np.asarray(scores) >= threshold).astype(np.int64)


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUC; tied scores contribute 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc requires both classes present")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    csum = np.cumsum(counts)
    avg_rank = csum - (counts - 1) / 2.0  # average 1-based rank of each tie group
    ranks = avg_rank[inverse]
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def confusion(predictions: np.ndarray, labels: np.ndarray) -> tuple[int, int, int, int]:
    """Return (tp, tn, fp, fn) at the window level."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels must be aligned")
    tp = int(((predictions == 1) & (labels == 1)).sum())
    tn = int(((predictions == 0) & (labels == 0)).sum())
    fp = int(((predictions == 1) & (labels == 0)).sum())
    fn = int(((predictions == 0) & (labels == 1)).sum())
    return tp, tn, fp, fn


def evaluate(scores: np.ndarray, labels: np.ndarray, threshold: float) -> EvalReport:
    predictions = classify(scores, threshold)
    tp, tn, fp, fn = confusion(predictions, labels)
    return EvalReport(
        auc=roc_auc(scores, labels),
        tp=tp,
        tn=tn,
        fp=fp,
        fn=fn,
        predicted_anomalies=tp + fp,
        threshold=float(threshold),
        n_windows=int(labels.size),
    )


def shift_for_plot(series: ScoreSeries, width: int | None = None) -> np.ndarray:
    """Plotting x-coordinates displaced by one window length.

    Returns shifted positions only; the scores themselves are untouched and
    metrics always use the unshifted alignment.
    """
    w = series.width if width is None else width
    return series.starts + w
