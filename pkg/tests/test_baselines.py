"""OOD detector, threshold calibration, and selective-prediction tests."""

import math

import mpmath
import numpy as np
import pytest

from vrf.baselines import (OodScorer, SelectiveClassifier, calibrate_threshold,
                           evaluate_detectors, fit_scorer, score,
                           selective_predict)
from vrf.core import predict
from vrf.errors import ValidationError
from vrf.zsf_index import ZsfIndex, knn_distance_batch


class TestScores:
    def test_msp_uniform(self):
        scorer = fit_scorer("msp", None, None, 10)
        s = score(scorer, None, np.zeros((1, 10)))
        assert s[0] == pytest.approx(0.1, abs=1e-12)

    def test_energy_ln2(self):
        scorer = fit_scorer("energy", None, None, 2)
        s = score(scorer, None, np.zeros((1, 2)))
        expected = float(mpmath.log(mpmath.mpf(2)))
        assert s[0] == pytest.approx(expected, abs=1e-12)

    def test_energy_extreme_logits_stable(self):
        scorer = fit_scorer("energy", None, None, 2)
        s = score(scorer, None, np.array([[1000.0, 999.0]]))
        assert np.isfinite(s[0]) and s[0] == pytest.approx(1000.0 + math.log(1 + math.e ** -1))

    def test_md_unit_distance(self):
        scorer = OodScorer(kind="md", class_means=np.zeros((1, 3)),
                           precision=np.eye(3))
        e1 = np.zeros((1, 3))
        e1[0, 0] = 1.0
        assert score(scorer, e1, None)[0] == pytest.approx(-1.0, abs=1e-12)

    def test_md_takes_nearest_class(self):
        means = np.array([[0.0, 0.0], [10.0, 0.0]])
        scorer = OodScorer(kind="md", class_means=means, precision=np.eye(2))
        x = np.array([[9.0, 0.0]])
        assert score(scorer, x, None)[0] == pytest.approx(-1.0, abs=1e-9)

    def test_rmd_zero_when_background_equals_class(self):
        scorer = OodScorer(kind="rmd", class_means=np.zeros((1, 2)),
                           precision=np.eye(2), background_mean=np.zeros(2),
                           background_precision=np.eye(2))
        x = np.array([[3.0, 4.0]])
        assert score(scorer, x, None)[0] == pytest.approx(0.0, abs=1e-9)

    def test_unfitted_scorer_rejected(self):
        with pytest.raises(ValidationError):
            score(OodScorer(kind="md"), np.zeros((1, 2)), None)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValidationError):
            fit_scorer("odin", None, None, 2)


class TestFitScorer:
    def test_degenerate_identical_points(self):
        feats = np.array([[1.0, 2.0]] * 3 + [[3.0, 4.0]] * 3)
        labels = np.array([0, 0, 0, 1, 1, 1])
        scorer = fit_scorer("md", feats, labels, 2)
        np.testing.assert_allclose(scorer.class_means, [[1, 2], [3, 4]])
        # zero within-class scatter regularizes to an isotropic ridge
        np.testing.assert_allclose(scorer.precision, np.eye(2) / 1e-4, rtol=1e-9)

    def test_single_sample_class_rejected(self):
        feats = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
        with pytest.raises(ValidationError, match="at least 2"):
            fit_scorer("md", feats, np.array([0, 1, 1]), 2)

    def test_gaussian_recovery_monte_carlo(self):
        rng = np.random.default_rng(7)
        n_per, dim = 10_000, 4
        true_means = np.array([[1.0, -1.0, 0.5, 0.0], [-2.0, 0.0, 1.0, 3.0]])
        chol = np.linalg.cholesky(np.array([
            [1.0, 0.3, 0.0, 0.0],
            [0.3, 2.0, 0.1, 0.0],
            [0.0, 0.1, 0.5, 0.2],
            [0.0, 0.0, 0.2, 1.5]]))
        true_cov = chol @ chol.T
        feats = np.concatenate([
            true_means[c] + rng.standard_normal((n_per, dim)) @ chol.T
            for c in range(2)])
        labels = np.repeat([0, 1], n_per)
        scorer = fit_scorer("rmd", feats, labels, 2)
        sigma = np.sqrt(np.diag(true_cov))
        assert np.all(np.abs(scorer.class_means - true_means) <= 3 * sigma / math.sqrt(n_per) + 1e-9)
        fitted_cov = np.linalg.inv(scorer.precision)
        frob = np.linalg.norm(fitted_cov - true_cov) / np.linalg.norm(true_cov)
        assert frob < 0.10
        assert scorer.background_precision is not None

    def test_msp_energy_fit_is_noop(self):
        for kind in ("msp", "energy"):
            scorer = fit_scorer(kind, None, None, 5)
            assert scorer.is_fitted and scorer.class_means is None

    def test_knn_detector_matches_failure_index_engine(self, rng):
        # same member set => identical distances through either path
        feats = rng.standard_normal((300, 8)).astype(np.float32)
        scorer = fit_scorer("knn", feats, np.zeros(300), 2, p_percent=2.0)
        index = ZsfIndex.from_features(feats, 2.0)
        queries = rng.standard_normal((50, 8)).astype(np.float32)
        from vrf.core import normalize_features
        expected = -knn_distance_batch(index, normalize_features(queries))
        np.testing.assert_array_equal(score(scorer, queries, None), expected)


class TestThreshold:
    def test_worked_example_exhaustive(self):
        scores = np.arange(1.0, 101.0)
        lam = calibrate_threshold(scores, 0.95)
        # independent oracle: try every candidate, keep the largest feasible
        feasible = [t for t in scores if np.mean(scores >= t) >= 0.95]
        assert lam == max(feasible) == 6.0

    def test_all_equal_scores(self):
        scores = np.full(50, 3.25)
        lam = calibrate_threshold(scores)
        assert lam == 3.25
        assert np.mean(scores >= lam) == 1.0

    def test_standard_normal_tpr_window(self):
        rng = np.random.default_rng(3)
        scores = rng.standard_normal(10_000)
        lam = calibrate_threshold(scores, 0.95)
        tpr = float(np.mean(scores >= lam))
        assert 0.945 <= tpr <= 0.955

    def test_requires_twenty_scores(self):
        with pytest.raises(ValidationError):
            calibrate_threshold(np.arange(19.0))

    def test_monotone_routing_law(self, rng):
        scores = rng.standard_normal(500)
        counts = [int(np.sum(scores >= lam)) for lam in np.linspace(-3, 3, 50)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_tpr_one_keeps_everything(self):
        scores = np.arange(100.0)
        lam = calibrate_threshold(scores, 1.0)
        assert lam == 0.0 and np.mean(scores >= lam) == 1.0


class TestSelectivePrediction:
    def _setup(self, rng, n=100, k=4):
        zs = rng.standard_normal((n, k))
        ft = rng.standard_normal((n, k))
        feats = rng.standard_normal((n, 6))
        return feats, zs, ft

    def test_minus_inf_routes_everything_to_ft(self, rng):
        feats, zs, ft = self._setup(rng)
        clf = SelectiveClassifier(fit_scorer("msp", None, None, 4), float("-inf"))
        np.testing.assert_array_equal(selective_predict(clf, feats, zs, ft), predict(ft))

    def test_plus_inf_routes_everything_to_zs(self, rng):
        feats, zs, ft = self._setup(rng)
        clf = SelectiveClassifier(fit_scorer("msp", None, None, 4), float("inf"))
        np.testing.assert_array_equal(selective_predict(clf, feats, zs, ft), predict(zs))

    def test_binary_weight_equivalence(self, small_manifest, small_index):
        """knn selective prediction over the failure set, thresholded at
        -a, routes exactly like the binary weight at a."""
        from vrf.ensembling import EnsembleConfig, vrf_pipeline
        from vrf.weighting import WeightFunction

        a = 0.9
        scorer = OodScorer(kind="knn", knn_index=small_index)
        clf = SelectiveClassifier(scorer=scorer, threshold=-a)
        data = small_manifest.load_split("test")
        sp_preds = selective_predict(clf, data.features_ft, data.logits_zs, data.logits_ft)

        config = EnsembleConfig(weight_fn=WeightFunction.binary(a))
        vrf_preds = vrf_pipeline(small_manifest, "test", small_index, config).predictions
        np.testing.assert_array_equal(sp_preds, vrf_preds)


class TestEvaluateDetectors:
    def test_report_layout(self, small_manifest):
        reports = evaluate_detectors(small_manifest, ["msp", "energy", "knn"], tpr=0.95)
        assert [r["detector"] for r in reports] == ["msp", "energy", "knn"]
        for rep in reports:
            assert set(rep) == {"detector", "lambda", "id_acc", "ood_acc"}
            assert math.isfinite(rep["lambda"])
            assert 0.0 <= rep["id_acc"] <= 1.0
            assert set(rep["ood_acc"]) == {"shift"}

    def test_detector_order_does_not_change_numbers(self, small_manifest):
        fwd = evaluate_detectors(small_manifest, ["msp", "md", "energy"])
        rev = evaluate_detectors(small_manifest, ["energy", "md", "msp"])
        by_name_fwd = {r["detector"]: r for r in fwd}
        by_name_rev = {r["detector"]: r for r in rev}
        assert by_name_fwd == by_name_rev

    def test_lambda_overrides_reproduce_pure_models(self, small_manifest):
        data = small_manifest.load_split("test")
        zs_acc = float(np.mean(predict(data.logits_zs) == data.labels))
        ft_acc = float(np.mean(predict(data.logits_ft) == data.labels))
        rep_zs = evaluate_detectors(small_manifest, ["msp"], threshold_override=float("inf"))[0]
        rep_ft = evaluate_detectors(small_manifest, ["msp"], threshold_override=float("-inf"))[0]
        assert rep_zs["id_acc"] == pytest.approx(zs_acc)
        assert rep_ft["id_acc"] == pytest.approx(ft_acc)
