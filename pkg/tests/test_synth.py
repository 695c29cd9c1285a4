"""Generator determinism, planted structure, and residual-pair moment tests."""

import json
from dataclasses import replace

import numpy as np
import pytest

from vrf.analysis import residual_stats
from vrf.errors import ValidationError
from vrf.synth import RNG_ALGORITHM, SynthSpec, generate_dataset, generate_residual_pair
from vrf.tensor_io import load_manifest
from vrf.zsf_index import build_zsf

FAST_SPEC = SynthSpec(n_train=400, n_id_test=150, n_ood_test=150,
                      dim=8, num_classes=3, seed=42)


def _all_bytes(root):
    return {p.name: p.read_bytes() for p in sorted(root.iterdir()) if p.is_file()}


class TestGenerateDataset:
    def test_fixed_seed_is_byte_identical(self, tmp_path):
        generate_dataset(FAST_SPEC, tmp_path / "a")
        generate_dataset(FAST_SPEC, tmp_path / "b")
        assert _all_bytes(tmp_path / "a") == _all_bytes(tmp_path / "b")

    def test_different_seed_differs(self, tmp_path):
        generate_dataset(FAST_SPEC, tmp_path / "a")
        generate_dataset(replace(FAST_SPEC, seed=43), tmp_path / "b")
        assert _all_bytes(tmp_path / "a") != _all_bytes(tmp_path / "b")

    def test_manifest_loads_with_expected_roles(self, tmp_path):
        manifest = load_manifest(generate_dataset(FAST_SPEC, tmp_path))
        roles = {name: manifest.split(name).role for name in manifest.split_names()}
        assert roles == {"train": "id-train", "val": "id-val",
                         "test": "id-test", "shift": "ood-test"}
        assert manifest.load_split("train").n == 400

    def test_multiple_ood_splits(self, tmp_path):
        spec = replace(FAST_SPEC, n_ood_splits=2)
        manifest = load_manifest(generate_dataset(spec, tmp_path))
        assert manifest.split_names(roles=("ood-test",)) == ["shift1", "shift2"]

    def test_features_unit_norm(self, tmp_path):
        manifest = load_manifest(generate_dataset(FAST_SPEC, tmp_path))
        for name in manifest.split_names():
            data = manifest.load_split(name)
            for feats in (data.features_zs, data.features_ft):
                norms = np.linalg.norm(feats.astype(np.float64), axis=1)
                np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_planted_failure_set_recovered_exactly(self, tmp_path):
        manifest = load_manifest(generate_dataset(FAST_SPEC, tmp_path))
        train = manifest.load_split("train")
        index = build_zsf(train.labels, train.logits_zs, train.logits_ft,
                          train.features_ft)
        assert index.size == round(FAST_SPEC.zsf_fraction * FAST_SPEC.n_train)

    def test_zero_failure_fraction_gives_empty_index(self, tmp_path):
        spec = replace(FAST_SPEC, zsf_fraction=0.0)
        manifest = load_manifest(generate_dataset(spec, tmp_path))
        train = manifest.load_split("train")
        index = build_zsf(train.labels, train.logits_zs, train.logits_ft,
                          train.features_ft)
        assert index.is_empty

    def test_sidecar_records_rng_algorithm(self, tmp_path):
        generate_dataset(FAST_SPEC, tmp_path)
        doc = json.loads((tmp_path / "synth_spec.json").read_text())
        assert doc["rng"] == RNG_ALGORITHM
        assert doc["seed"] == FAST_SPEC.seed
        assert SynthSpec.from_json(tmp_path / "synth_spec.json") == FAST_SPEC

    def test_infeasible_specs_rejected(self):
        for overrides in ({"dim": 1}, {"num_classes": 1}, {"zsf_fraction": 1.0},
                          {"confidence_lo": 0.2}, {"n_train": 0},
                          {"n_ood_splits": 0}, {"zs_correct_far": 1.5}):
            with pytest.raises(ValidationError):
                replace(FAST_SPEC, **overrides).validate()

    def test_bad_spec_json(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps({"n_train": 10, "bogus_field": 1}))
        with pytest.raises(ValidationError):
            SynthSpec.from_json(path)


class TestResidualPair:
    def test_uncorrelated_pearson_bound(self):
        eta_zs, eta_ft = generate_residual_pair(100_000, 1.0, 1.0, 0.0, seed=1)
        assert abs(residual_stats(eta_zs, eta_ft).pearson) < 0.01

    def test_perfect_correlation_identical_streams(self):
        eta_zs, eta_ft = generate_residual_pair(1000, 1.0, 1.0, 1.0, seed=2)
        np.testing.assert_allclose(eta_zs, eta_ft, atol=1e-12)

    def test_requested_moments_recovered(self):
        # covariance 0.5 from corr = 0.5 / sqrt(2)
        corr = 0.5 / np.sqrt(2.0)
        eta_zs, eta_ft = generate_residual_pair(100_000, 2.0, 1.0, corr, seed=3)
        stats = residual_stats(eta_zs, eta_ft)
        assert stats.var_zs == pytest.approx(2.0, rel=0.03)
        assert stats.var_ft == pytest.approx(1.0, rel=0.03)
        assert stats.cov == pytest.approx(0.5, rel=0.03)

    def test_seed_determinism(self):
        a = generate_residual_pair(100, 1.0, 2.0, 0.3, seed=9)
        b = generate_residual_pair(100, 1.0, 2.0, 0.3, seed=9)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_invalid_inputs(self):
        with pytest.raises(ValidationError):
            generate_residual_pair(10, -1.0, 1.0, 0.0, seed=0)
        with pytest.raises(ValidationError):
            generate_residual_pair(10, 1.0, 1.0, 1.5, seed=0)
        with pytest.raises(ValidationError):
            generate_residual_pair(0, 1.0, 1.0, 0.0, seed=0)

    def test_zero_variance_stream(self):
        eta_zs, eta_ft = generate_residual_pair(100, 0.0, 1.0, 0.0, seed=4)
        assert np.all(eta_zs == 0.0)
        assert np.var(eta_ft) > 0.5
