"""Per-sample combination of zero-shot and fine-tuned model outputs.

Probability space (default): softmax each model, then mix row i as
w_i * P_ft + (1 - w_i) * P_zs. Logit space: mix the raw logits with the
same weights, then softmax. A constant weight reduces both to the
classic fixed-coefficient ensembles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import accuracy, apply_temperature, fit_temperature, predict, softmax
from .errors import ValidationError
from .tensor_io import DatasetManifest
from .weighting import WeightFunction, weight_batch
from .zsf_index import ZsfIndex, knn_distance_batch

SPACES = ("prob", "logit")


@dataclass(frozen=True)
class EnsembleConfig:
    weight_fn: WeightFunction
    space: str = "prob"
    use_calibration: bool = False
    # Which encoder's features are used for distance queries. The failure
    # set itself always holds fine-tuned features.
    query_features: str = "ft"

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValidationError(f"space must be one of {SPACES}, got {self.space!r}")
        if self.query_features not in ("ft", "zs"):
            raise ValidationError("query_features must be 'ft' or 'zs'")

    def to_dict(self):
        return {
            "weight": self.weight_fn.to_dict(),
            "space": self.space,
            "use_calibration": self.use_calibration,
            "query_features": self.query_features,
        }


def ensemble(zs_logits, ft_logits, weights, space="prob"):
    """Combine two logit matrices under per-sample fine-tuned weights.

    Returns (probs, predictions). Rows of ``probs`` are probability
    vectors in either space; predictions break ties toward the smaller
    class index.
    """
    zs_logits = np.asarray(zs_logits)
    ft_logits = np.asarray(ft_logits)
    weights = np.asarray(weights, dtype=np.float64)
    if zs_logits.shape != ft_logits.shape:
        raise ValidationError(
            f"logit shape mismatch: {zs_logits.shape} vs {ft_logits.shape}"
        )
    if weights.shape != (zs_logits.shape[0],):
        raise ValidationError("weights must be one scalar per row")
    if weights.size and (weights.min() < -1e-12 or weights.max() > 1 + 1e-12):
        raise ValidationError("weights must lie in [0, 1]")
    if space not in SPACES:
        raise ValidationError(f"space must be one of {SPACES}, got {space!r}")

    w = np.clip(weights, 0.0, 1.0)[:, None]
    if space == "prob":
        probs = w * softmax(ft_logits) + (1.0 - w) * softmax(zs_logits)
    else:
        probs = softmax(w * ft_logits + (1.0 - w) * zs_logits)
    return probs, predict(probs)


def ose(alpha, zs_logits, ft_logits):
    """Fixed-coefficient output-space ensemble: alpha on the fine-tuned model.

    Deliberately written out rather than delegating to ensemble(), so the
    two paths can cross-check each other.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    probs = alpha * softmax(ft_logits) + (1.0 - alpha) * softmax(zs_logits)
    return probs, predict(probs)


def lse(alpha, zs_logits, ft_logits):
    """Fixed-coefficient logit-space ensemble."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    zs_logits = np.asarray(zs_logits, dtype=np.float64)
    ft_logits = np.asarray(ft_logits, dtype=np.float64)
    mixed = alpha * ft_logits + (1.0 - alpha) * zs_logits
    return softmax(mixed), predict(mixed)


@dataclass
class PipelineResult:
    split: str
    config: EnsembleConfig
    distances: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    probs: np.ndarray = field(repr=False)
    predictions: np.ndarray = field(repr=False)
    accuracy: float = 0.0
    mean_weight: float = 0.0

    @property
    def n(self):
        return len(self.predictions)

    def to_report(self):
        return {
            "split": self.split,
            "config": self.config.to_dict(),
            "accuracy": self.accuracy,
            "mean_weight": self.mean_weight,
            "n": self.n,
        }


def fit_split_temperatures(manifest: DatasetManifest, split_name=None):
    """Fit one temperature per model on an id-val split (the first, by default)."""
    if split_name is None:
        split_name = manifest.split_names(roles=("id-val",))[0]
    val = manifest.load_split(split_name)
    return (
        fit_temperature(val.logits_zs, val.labels),
        fit_temperature(val.logits_ft, val.labels),
    )


def vrf_pipeline(manifest: DatasetManifest, split_name, index: ZsfIndex,
                 config: EnsembleConfig, threads=1, temperatures=None) -> PipelineResult:
    """Run the full distance -> weight -> ensemble chain on one split.

    Reports top-1 accuracy and the mean fine-tuned weight; in-distribution
    splits are expected to draw larger mean weights than shifted ones.
    """
    data = manifest.load_split(split_name)
    queries = data.features_ft if config.query_features == "ft" else data.features_zs
    distances = knn_distance_batch(index, queries, threads=threads)
    weights = weight_batch(config.weight_fn, distances)

    zs_logits, ft_logits = data.logits_zs, data.logits_ft
    if config.use_calibration:
        if temperatures is None:
            temperatures = fit_split_temperatures(manifest)
        t_zs, t_ft = temperatures
        zs_logits = apply_temperature(zs_logits, t_zs)
        ft_logits = apply_temperature(ft_logits, t_ft)

    probs, preds = ensemble(zs_logits, ft_logits, weights, space=config.space)
    return PipelineResult(
        split=split_name,
        config=config,
        distances=distances,
        weights=weights,
        probs=probs,
        predictions=preds,
        accuracy=accuracy(preds, data.labels),
        mean_weight=float(weights.mean()) if len(weights) else float("nan"),
    )
