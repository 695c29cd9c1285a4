"""Elementary prediction operations shared by every downstream module.

All reductions accumulate in float64 regardless of storage dtype, so
row sums and likelihoods stay trustworthy at millions of rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass
class ModelOutputs:
    """Aligned (features, logits) pair for one model on one split."""

    features: np.ndarray  # N x D float32
    logits: np.ndarray    # N x K float32
    model_tag: str        # "zs" or "ft"

    def __post_init__(self):
        if self.features.ndim != 2 or self.logits.ndim != 2:
            raise ValidationError("features and logits must be 2-d arrays")
        if self.features.shape[0] != self.logits.shape[0]:
            raise ValidationError(
                f"row mismatch: {self.features.shape[0]} features vs "
                f"{self.logits.shape[0]} logits"
            )
        if self.model_tag not in ("zs", "ft"):
            raise ValidationError(f"model_tag must be 'zs' or 'ft', got {self.model_tag!r}")


@dataclass(frozen=True)
class CalibrationParams:
    """A fitted softmax temperature for one model."""

    temperature: float

    def __post_init__(self):
        if not (self.temperature > 0 and math.isfinite(self.temperature)):
            raise ValidationError(f"temperature must be positive, got {self.temperature}")


def softmax(logits):
    """Row-wise stable softmax. Rows sum to 1 within 1e-5 for any finite input.

    Max-subtraction keeps exp() in range even for logits around +-1e4;
    the per-row argmax is preserved exactly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValidationError("softmax input contains NaN or Inf")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=-1, keepdims=True)
    return shifted


def predict(logits):
    """Per-row argmax with ties broken by the smallest class index."""
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[1] < 1:
        raise ValidationError("predict expects an N x K matrix with K >= 1")
    if np.isnan(logits).any():
        raise ValidationError("predict input contains NaN")
    return np.argmax(logits, axis=1)


def accuracy(predictions, labels):
    """Top-1 exact-match fraction."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValidationError("predictions and labels must have the same shape")
    if predictions.size == 0:
        raise ValidationError("cannot compute accuracy of an empty split")
    return float(np.mean(predictions == labels.astype(predictions.dtype)))


def normalize_features(features):
    """Scale every row to unit L2 norm. Idempotent within 1e-6.

    A zero-norm row is an explicit error rather than a silent NaN.
    """
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValidationError("normalize_features expects an N x D matrix")
    if not np.all(np.isfinite(features)):
        raise ValidationError("features contain NaN or Inf")
    norms = np.linalg.norm(features.astype(np.float64, copy=False), axis=1)
    if features.shape[0] and norms.min() <= 0.0:
        bad = int(np.argmin(norms))
        raise ValidationError(f"zero-norm feature row at index {bad}")
    out = features.astype(np.float64, copy=False) / norms[:, None]
    return out.astype(np.float32) if features.dtype == np.float32 else out


def apply_temperature(logits, params: CalibrationParams):
    """Divide logits by the fitted temperature; argmax is unchanged for any T > 0."""
    return np.asarray(logits) / params.temperature


def nll(logits, labels, temperature=1.0):
    """Mean negative log-likelihood of softmax(logits / T) at the true labels."""
    logits = np.asarray(logits, dtype=np.float64) / temperature
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    picked = shifted[np.arange(len(labels)), np.asarray(labels, dtype=np.intp)]
    return float(np.mean(logz - picked))


_T_LO, _T_HI = 0.05, 20.0
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def fit_temperature(logits, labels) -> CalibrationParams:
    """Fit a single softmax temperature by minimizing validation NLL.

    Golden-section search on log T over [log 0.05, log 20], run until the
    bracket is narrower than 1e-3 in T. The NLL is unimodal in T, so the
    search converges to the global minimum on the interval.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValidationError("logits and labels are misaligned")
    if logits.shape[0] < 2:
        raise ValidationError("need at least 2 samples to fit a temperature")
    if np.unique(labels).size < 2:
        raise ValidationError("need at least 2 distinct labels to fit a temperature")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValidationError("label out of range")
    if not np.all(np.isfinite(logits)):
        raise ValidationError("logits contain NaN or Inf")

    lo, hi = math.log(_T_LO), math.log(_T_HI)
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1 = nll(logits, labels, math.exp(x1))
    f2 = nll(logits, labels, math.exp(x2))
    while math.exp(hi) - math.exp(lo) > 1e-3:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _GOLDEN * (hi - lo)
            f1 = nll(logits, labels, math.exp(x1))
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _GOLDEN * (hi - lo)
            f2 = nll(logits, labels, math.exp(x2))
    return CalibrationParams(temperature=math.exp((lo + hi) / 2.0))
