"""Selective prediction via out-of-distribution detectors.

A detector assigns each sample a score S(x) where higher means more
in-distribution. The threshold lambda is calibrated on held-out ID
scores so that at least the target fraction (default 95%) of ID samples
score at or above it. At test time a sample routes to the fine-tuned
model when S(x) >= lambda and to the zero-shot model otherwise.

Score functions:

    msp     max softmax probability of the fine-tuned logits
    energy  logsumexp of the fine-tuned logits
    md      -min_c squared Mahalanobis distance to class c
            (class means, pooled within-class covariance)
    rmd     md relative to a single background Gaussian over all
            training features
    knn     -distance to the k-th nearest training feature, indexed over
            the whole id-train set with the same p% rule as the failure
            set (structurally the same query engine, different members)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import normalize_features, predict, softmax
from .errors import ValidationError
from .zsf_index import ZsfIndex, knn_distance_batch

DETECTOR_KINDS = ("msp", "energy", "md", "rmd", "knn")

# Relative ridge added to covariance diagonals before inversion; keeps
# degenerate synthetic inputs (identical points) invertible.
_COV_RIDGE = 1e-4


@dataclass
class OodScorer:
    kind: str
    class_means: np.ndarray | None = None        # K x D
    precision: np.ndarray | None = None          # D x D, pooled covariance inverse
    background_mean: np.ndarray | None = None    # D
    background_precision: np.ndarray | None = None
    knn_index: ZsfIndex | None = None

    @property
    def is_fitted(self):
        if self.kind in ("msp", "energy"):
            return True
        if self.kind == "md":
            return self.class_means is not None and self.precision is not None
        if self.kind == "rmd":
            return (self.class_means is not None and self.precision is not None
                    and self.background_mean is not None
                    and self.background_precision is not None)
        return self.knn_index is not None


def _regularized_inverse(cov):
    dim = cov.shape[0]
    trace = float(np.trace(cov))
    ridge = _COV_RIDGE * (trace / dim if trace > 0 else 1.0)
    cov = cov + ridge * np.eye(dim)
    try:
        return np.linalg.inv(cov)
    except np.linalg.LinAlgError as e:
        raise ValidationError(f"covariance singular even after regularization: {e}") from e


def fit_scorer(kind, features, labels, num_classes, p_percent=0.1) -> OodScorer:
    """Fit detector state on the id-train split's fine-tuned features.

    msp/energy need no fitting. md/rmd estimate class means and a pooled
    within-class covariance (plus a background Gaussian for rmd), in
    float64 with a relative ridge before inversion. knn builds a distance
    index over every training feature.
    """
    if kind not in DETECTOR_KINDS:
        raise ValidationError(f"unknown detector kind {kind!r}")
    if kind in ("msp", "energy"):
        return OodScorer(kind=kind)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValidationError("features and labels are misaligned")

    if kind == "knn":
        index = ZsfIndex.from_features(features.astype(np.float32), p_percent)
        return OodScorer(kind="knn", knn_index=index)

    n, dim = features.shape
    means = np.zeros((num_classes, dim))
    centered = np.empty_like(features)
    for c in range(num_classes):
        rows = labels == c
        count = int(rows.sum())
        if count < 2:
            raise ValidationError(
                f"class {c} has {count} samples; md/rmd need at least 2 per class"
            )
        means[c] = features[rows].mean(axis=0)
        centered[rows] = features[rows] - means[c]
    pooled_cov = centered.T @ centered / n
    scorer = OodScorer(kind=kind, class_means=means,
                       precision=_regularized_inverse(pooled_cov))
    if kind == "rmd":
        scorer.background_mean = features.mean(axis=0)
        bg_centered = features - scorer.background_mean
        bg_cov = bg_centered.T @ bg_centered / n
        scorer.background_precision = _regularized_inverse(bg_cov)
    return scorer


def _class_mahalanobis_sq(features, means, precision):
    """Squared Mahalanobis distances, N x K, via whitening.

    With precision = C C^T (Cholesky), distances are plain squared
    Euclidean norms in the whitened space, which vectorizes over classes
    without materializing an N x K x D tensor.
    """
    chol = np.linalg.cholesky((precision + precision.T) / 2.0)
    y = features @ chol
    m = np.atleast_2d(means) @ chol
    sq = (np.einsum("ij,ij->i", y, y)[:, None]
          - 2.0 * (y @ m.T)
          + np.einsum("ij,ij->i", m, m)[None, :])
    return np.maximum(sq, 0.0)


def score(scorer: OodScorer, features, ft_logits):
    """Detector scores for a batch; higher means more in-distribution."""
    if not scorer.is_fitted:
        raise ValidationError(f"{scorer.kind} scorer is not fitted")
    if scorer.kind == "msp":
        return softmax(ft_logits).max(axis=1)
    if scorer.kind == "energy":
        logits = np.asarray(ft_logits, dtype=np.float64)
        m = logits.max(axis=1)
        return m + np.log(np.sum(np.exp(logits - m[:, None]), axis=1))

    features = np.asarray(features, dtype=np.float64)
    if scorer.kind == "knn":
        queries = normalize_features(features.astype(np.float32))
        return -knn_distance_batch(scorer.knn_index, queries)

    per_class = _class_mahalanobis_sq(features, scorer.class_means, scorer.precision)
    if scorer.kind == "md":
        return -per_class.min(axis=1)
    background = _class_mahalanobis_sq(features, scorer.background_mean,
                                       scorer.background_precision)[:, 0]
    return -(per_class - background[:, None]).min(axis=1)


def calibrate_threshold(id_scores, tpr=0.95):
    """Largest threshold keeping at least ``tpr`` of the ID scores above it.

    With n sorted scores the answer is the (n - ceil(tpr*n) + 1)-th
    smallest: any higher threshold drops the kept fraction below the
    target. Requires at least 20 calibration scores.
    """
    scores = np.sort(np.asarray(id_scores, dtype=np.float64))
    n = len(scores)
    if n < 20:
        raise ValidationError(f"need at least 20 id-val scores, got {n}")
    if not 0.0 < tpr <= 1.0:
        raise ValidationError(f"tpr must be in (0, 1], got {tpr}")
    keep = min(n, max(1, math.ceil(tpr * n)))
    return float(scores[n - keep])


@dataclass
class SelectiveClassifier:
    scorer: OodScorer
    threshold: float

    def __post_init__(self):
        if math.isnan(self.threshold):
            raise ValidationError("threshold must not be NaN")


def selective_predict(classifier: SelectiveClassifier, features, zs_logits, ft_logits):
    """Route each sample: fine-tuned prediction if scored ID, zero-shot otherwise."""
    scores = score(classifier.scorer, features, ft_logits)
    use_ft = scores >= classifier.threshold
    return np.where(use_ft, predict(ft_logits), predict(zs_logits))


def evaluate_detectors(manifest, kinds, tpr=0.95, p_percent=0.1, threshold_override=None):
    """Fit, calibrate, and evaluate each detector across the manifest's splits.

    Returns one report per detector:
    {"detector", "lambda", "id_acc", "ood_acc": {split: acc}}.
    """
    train = manifest.load_split(manifest.single_split("id-train").name)
    val = manifest.load_split(manifest.split_names(roles=("id-val",))[0])
    id_test_names = manifest.split_names(roles=("id-test",))
    ood_names = manifest.split_names(roles=("ood-test",))

    reports = []
    for kind in kinds:
        scorer = fit_scorer(kind, train.features_ft, train.labels,
                            manifest.num_classes, p_percent=p_percent)
        if threshold_override is not None:
            lam = float(threshold_override)
        else:
            lam = calibrate_threshold(score(scorer, val.features_ft, val.logits_ft), tpr)
        clf = SelectiveClassifier(scorer=scorer, threshold=lam)

        id_accs = []
        for name in id_test_names:
            data = manifest.load_split(name)
            preds = selective_predict(clf, data.features_ft, data.logits_zs, data.logits_ft)
            id_accs.append(float(np.mean(preds == data.labels)))
        ood_acc = {}
        for name in ood_names:
            data = manifest.load_split(name)
            preds = selective_predict(clf, data.features_ft, data.logits_zs, data.logits_ft)
            ood_acc[name] = float(np.mean(preds == data.labels))
        reports.append({
            "detector": kind,
            "lambda": lam,
            "id_acc": float(np.mean(id_accs)) if id_accs else float("nan"),
            "ood_acc": ood_acc,
        })
    return reports
