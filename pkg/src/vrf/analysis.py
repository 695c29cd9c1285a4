"""Empirical analyses: accuracy-ratio curves, residual statistics,
closed-form optimal mixing weights, and ID-vs-shift frontier sweeps.

Undefined quantities (empty bins, zero denominators) are encoded as NaN
and written as "NA" in CSV output; they are never raised as errors.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import accuracy, apply_temperature, softmax
from .ensembling import ensemble, fit_split_temperatures, lse, ose
from .errors import ValidationError
from .weighting import sweep_grid, weight_batch
from .zsf_index import knn_distance_batch

DEFAULT_BIN_CENTERS = tuple(round(0.2 * i, 10) for i in range(1, 10))  # 0.2 .. 1.8
DEFAULT_BIN_HALFWIDTH = 0.1


@dataclass
class RatioCurve:
    """Per-bin fine-tuned-to-zero-shot accuracy ratio along the distance axis."""

    bin_centers: np.ndarray
    bin_halfwidth: float
    ratio: np.ndarray   # NaN where undefined
    counts: np.ndarray

    def defined(self):
        mask = ~np.isnan(self.ratio)
        return self.bin_centers[mask], self.ratio[mask]


def ratio_curve(distances, zs_preds, ft_preds, labels,
                bin_centers=DEFAULT_BIN_CENTERS,
                halfwidth=DEFAULT_BIN_HALFWIDTH) -> RatioCurve:
    """Bin samples by distance and take acc_ft / acc_zs inside each bin.

    A bin's ratio is undefined (NaN) when the bin is empty or its
    zero-shot accuracy is zero.
    """
    distances = np.asarray(distances, dtype=np.float64)
    zs_preds = np.asarray(zs_preds)
    ft_preds = np.asarray(ft_preds)
    labels = np.asarray(labels)
    if not (len(distances) == len(zs_preds) == len(ft_preds) == len(labels)):
        raise ValidationError("ratio_curve inputs are misaligned")
    if not halfwidth > 0:
        raise ValidationError("halfwidth must be positive")

    centers = np.asarray(bin_centers, dtype=np.float64)
    ratio = np.full(len(centers), np.nan)
    counts = np.zeros(len(centers), dtype=np.int64)
    zs_ok = zs_preds == labels
    ft_ok = ft_preds == labels
    # tolerant boundary so decimal-specified bins include their edges
    edge = halfwidth * (1.0 + 1e-12) + 1e-15
    for i, c in enumerate(centers):
        in_bin = np.abs(distances - c) <= edge
        counts[i] = int(in_bin.sum())
        if counts[i] == 0:
            continue
        acc_zs = float(zs_ok[in_bin].mean())
        if acc_zs == 0.0:
            continue
        ratio[i] = float(ft_ok[in_bin].mean()) / acc_zs
    return RatioCurve(centers, float(halfwidth), ratio, counts)


def residuals(probs, labels):
    """Per-sample gap between predicted and one-hot true probability.

    Returns P_hat(true label | x) - 1, the informative coordinate when
    the truth is taken as a one-hot vector. Always in [-1, 0].
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValidationError("probs and labels are misaligned")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValidationError("label out of range")
    return probs[np.arange(len(labels)), labels] - 1.0


@dataclass
class ResidualStats:
    """Second moments of the two residual streams and the implied optimal weights.

    Variances and the covariance use the population (1/N) convention.
    ``g_opt_independent`` minimizes the combined variance when the
    covariance is ignored; ``g_opt_correlated`` accounts for it. Either
    is NaN when its denominator vanishes.
    """

    var_zs: float
    var_ft: float
    cov: float
    g_opt_independent: float
    g_opt_correlated: float
    pearson: float
    n: int = 0

    def to_dict(self):
        return {
            "var_zs": self.var_zs,
            "var_ft": self.var_ft,
            "cov": self.cov,
            "g_opt_independent": self.g_opt_independent,
            "g_opt_correlated": self.g_opt_correlated,
            "pearson": self.pearson,
            "n": self.n,
        }


def optimal_weight_independent(var_zs, var_ft):
    denom = var_zs + var_ft
    if denom <= 0:
        return float("nan")
    return var_zs / denom


def optimal_weight_correlated(var_zs, var_ft, cov):
    # Equivalent to (1 + (var_ft - cov)/(var_zs - cov))^-1 where defined.
    denom = (var_zs - cov) + (var_ft - cov)
    if denom == 0 or var_zs - cov == 0:
        return float("nan")
    return (var_zs - cov) / denom


def combined_variance(g_ft, var_zs, var_ft, cov=0.0):
    """Variance of (1-g)*eta_zs + g*eta_ft under the given second moments."""
    g_zs = 1.0 - g_ft
    return g_zs ** 2 * var_zs + g_ft ** 2 * var_ft + 2.0 * g_zs * g_ft * cov


def residual_stats(eta_zs, eta_ft) -> ResidualStats:
    eta_zs = np.asarray(eta_zs, dtype=np.float64)
    eta_ft = np.asarray(eta_ft, dtype=np.float64)
    if eta_zs.shape != eta_ft.shape or eta_zs.ndim != 1:
        raise ValidationError("residual streams must be 1-d and aligned")
    n = len(eta_zs)
    if n < 2:
        raise ValidationError("need at least 2 samples for residual statistics")
    var_zs = float(np.var(eta_zs))
    var_ft = float(np.var(eta_ft))
    cov = float(np.mean((eta_zs - eta_zs.mean()) * (eta_ft - eta_ft.mean())))
    if var_zs > 0 and var_ft > 0:
        pearson = cov / math.sqrt(var_zs * var_ft)
    else:
        pearson = float("nan")
    return ResidualStats(
        var_zs=var_zs,
        var_ft=var_ft,
        cov=cov,
        g_opt_independent=optimal_weight_independent(var_zs, var_ft),
        g_opt_correlated=optimal_weight_correlated(var_zs, var_ft, cov),
        pearson=pearson,
        n=n,
    )


def binned_optimal_weight(distances, eta_zs, eta_ft,
                          bin_centers=DEFAULT_BIN_CENTERS,
                          halfwidth=DEFAULT_BIN_HALFWIDTH):
    """Covariance-aware optimal weight per distance bin.

    Returns (centers, g_opt array with NaN for undefined bins, counts).
    A single all-covering bin reduces to the global residual_stats.
    """
    distances = np.asarray(distances, dtype=np.float64)
    eta_zs = np.asarray(eta_zs, dtype=np.float64)
    eta_ft = np.asarray(eta_ft, dtype=np.float64)
    if not (len(distances) == len(eta_zs) == len(eta_ft)):
        raise ValidationError("binned_optimal_weight inputs are misaligned")
    centers = np.asarray(bin_centers, dtype=np.float64)
    g_opt = np.full(len(centers), np.nan)
    counts = np.zeros(len(centers), dtype=np.int64)
    edge = halfwidth * (1.0 + 1e-12) + 1e-15
    for i, c in enumerate(centers):
        in_bin = np.abs(distances - c) <= edge
        counts[i] = int(in_bin.sum())
        if counts[i] < 2:
            continue
        g_opt[i] = residual_stats(eta_zs[in_bin], eta_ft[in_bin]).g_opt_correlated
    return centers, g_opt, counts


@dataclass
class FrontierPoint:
    config: dict
    id_acc: float
    ood_accs: dict = field(default_factory=dict)

    @property
    def ood_mean(self):
        if not self.ood_accs:
            return float("nan")
        return float(np.mean(list(self.ood_accs.values())))


@dataclass
class _SplitEval:
    """Weight-independent per-split state, computed once per sweep."""

    labels: np.ndarray
    zs_logits: np.ndarray
    ft_logits: np.ndarray
    distances: np.ndarray


def _prepare_split(manifest, name, index, query_features="ft", threads=1):
    data = manifest.load_split(name)
    queries = data.features_ft if query_features == "ft" else data.features_zs
    return _SplitEval(
        labels=data.labels,
        zs_logits=data.logits_zs,
        ft_logits=data.logits_ft,
        distances=knn_distance_batch(index, queries, threads=threads),
    )


def _eval_weight_fn(prep: _SplitEval, fn, space):
    weights = weight_batch(fn, prep.distances)
    _, preds = ensemble(prep.zs_logits, prep.ft_logits, weights, space=space)
    return accuracy(preds, prep.labels)


def frontier(manifest, method, index=None, grid=None, threads=1):
    """One (id-test accuracy, per-shift accuracies) point per grid element.

    method "ose"/"lse" sweeps the constant mixing coefficient; "vrf"
    sweeps the sigmoid (a, b) grid and needs a failure-set index. The
    headline shift number is the unweighted mean over ood-test splits.
    """
    id_test_names = manifest.split_names(roles=("id-test",))
    ood_names = manifest.split_names(roles=("ood-test",))
    if not id_test_names:
        raise ValidationError("frontier needs an id-test split")
    if not ood_names:
        raise ValidationError("frontier needs at least one ood-test split")
    id_name = id_test_names[0]
    eval_names = [id_name] + ood_names

    points = []
    if method in ("ose", "lse"):
        combine = ose if method == "ose" else lse
        alphas = grid if grid is not None else [fn.alpha for fn in sweep_grid("constant")]
        for alpha in alphas:
            accs = {}
            for name in eval_names:
                data = manifest.load_split(name)
                _, preds = combine(alpha, data.logits_zs, data.logits_ft)
                accs[name] = accuracy(preds, data.labels)
            points.append(FrontierPoint(
                config={"variant": method, "alpha": alpha},
                id_acc=accs[id_name],
                ood_accs={n: accs[n] for n in ood_names},
            ))
    elif method == "vrf":
        if index is None:
            raise ValidationError("vrf frontier needs a failure-set index")
        fns = grid if grid is not None else sweep_grid("sigmoid")
        prepared = {name: _prepare_split(manifest, name, index, threads=threads)
                    for name in eval_names}
        for fn in fns:
            accs = {name: _eval_weight_fn(prep, fn, "prob")
                    for name, prep in prepared.items()}
            points.append(FrontierPoint(
                config=fn.to_dict(),
                id_acc=accs[id_name],
                ood_accs={n: accs[n] for n in ood_names},
            ))
    else:
        raise ValidationError(f"unknown frontier method {method!r}")
    return points


def select_hyperparams(candidates):
    """Pick the entry with the highest validation accuracy.

    ``candidates`` is a sequence of (WeightFunction, accuracy). Ties go
    to the smaller b, then smaller a, then smaller alpha, so selection
    is deterministic for grid sweeps.
    """
    if not candidates:
        raise ValidationError("no candidates to select from")

    def key(item):
        fn, acc = item
        return (
            -acc,
            fn.b if fn.b is not None else math.inf,
            fn.a if fn.a is not None else math.inf,
            fn.alpha if fn.alpha is not None else math.inf,
        )

    return min(candidates, key=key)


def sweep_weights(manifest, index, kind, select_on=None, space="prob",
                  threads=1, a_values=None, b_values=None, alphas=None):
    """Evaluate a weight grid on a validation split and select the best.

    Returns (selected WeightFunction, selected accuracy, all results),
    where results is a list of (WeightFunction, accuracy).
    """
    if select_on is None:
        select_on = manifest.split_names(roles=("id-val",))[0]
    grid = sweep_grid(kind, a_values=a_values, b_values=b_values, alphas=alphas)
    if not grid:
        raise ValidationError("empty hyperparameter grid")
    prep = _prepare_split(manifest, select_on, index, threads=threads)
    results = [(fn, _eval_weight_fn(prep, fn, space)) for fn in grid]
    best_fn, best_acc = select_hyperparams(results)
    return best_fn, best_acc, results


def _na(x):
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def write_ratio_curve_csv(curve: RatioCurve, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_center", "ratio", "count"])
        for c, r, n in zip(curve.bin_centers, curve.ratio, curve.counts):
            writer.writerow([repr(float(c)), _na(r), int(n)])


def write_binned_gopt_csv(centers, g_opt, counts, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_center", "g_opt", "count"])
        for c, g, n in zip(centers, g_opt, counts):
            writer.writerow([repr(float(c)), _na(g), int(n)])


def write_frontier_csv(points, path):
    split_names = sorted({n for p in points for n in p.ood_accs})
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["config", "id_acc", "ood_acc_mean"] + split_names)
        for p in points:
            row = [json.dumps(p.config, sort_keys=True), repr(p.id_acc), _na(p.ood_mean)]
            row += [_na(p.ood_accs.get(n)) for n in split_names]
            writer.writerow(row)


def write_residual_stats_json(stats: ResidualStats, path):
    doc = {k: (None if isinstance(v, float) and math.isnan(v) else v)
           for k, v in stats.to_dict().items()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def calibrated_probs(manifest, split_name, use_calibration=True, temperatures=None):
    """Softmax probabilities for both models, temperature-scaled by default.

    Residual analyses follow the calibrate-first convention; pass
    use_calibration=False for raw probabilities.
    """
    data = manifest.load_split(split_name)
    zs_logits, ft_logits = data.logits_zs, data.logits_ft
    if use_calibration:
        if temperatures is None:
            temperatures = fit_split_temperatures(manifest)
        t_zs, t_ft = temperatures
        zs_logits = apply_temperature(zs_logits, t_zs)
        ft_logits = apply_temperature(ft_logits, t_ft)
    return softmax(zs_logits), softmax(ft_logits), data.labels
