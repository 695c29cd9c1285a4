"""Conformance against the consumer package: everything the extractor
emits must load through the primary pipeline with zero invariant
complaints, norms included, and repeat runs must be byte-identical."""

import numpy as np
import pytest

import vrf
from vrf_extractor.extract import extract
from vrf_extractor.job import ExtractionJob


@pytest.fixture(scope="module")
def extracted(toy_assets):
    """Three splits extracted from the toy dataset into one manifest."""
    out = toy_assets["root"] / "conformance"
    for name, role in (("train", "id-train"), ("val", "id-val"), ("test", "id-test")):
        job = ExtractionJob(
            zs_checkpoint=toy_assets["zs"],
            ft_checkpoint=toy_assets["ft"],
            zs_class_embeddings=toy_assets["embeddings"],
            dataset_dir=toy_assets["data_dir"],
            split_name=name,
            split_role=role,
            output_dir=out,
            batch_size=5,
            image_size=16,
        )
        extract(job)
    return out


def test_manifest_validates_and_splits_load(extracted):
    manifest = vrf.load_manifest(extracted / "manifest.json")
    assert manifest.num_classes == 3
    for name in ("train", "val", "test"):
        data = manifest.load_split(name)
        assert data.n == 12
        assert data.logits_zs.shape == (12, 3)
        assert data.labels.dtype == np.uint32


def test_feature_norms_within_tolerance(extracted):
    manifest = vrf.load_manifest(extracted / "manifest.json")
    for name in ("train", "val", "test"):
        data = manifest.load_split(name)
        for feats in (data.features_zs, data.features_ft):
            norms = np.linalg.norm(feats.astype(np.float64), axis=1)
            assert np.max(np.abs(norms - 1.0)) <= 1e-4


def test_rows_align_across_tensors(extracted):
    """Row i of every tensor refers to the same image: identical images
    in train and test (same dataset) produce identical rows."""
    manifest = vrf.load_manifest(extracted / "manifest.json")
    train = manifest.load_split("train")
    test = manifest.load_split("test")
    np.testing.assert_array_equal(train.features_ft, test.features_ft)
    np.testing.assert_array_equal(train.labels, test.labels)


def test_primary_pipeline_runs_on_extracted_tensors(extracted):
    manifest = vrf.load_manifest(extracted / "manifest.json")
    train = manifest.load_split("train")
    index = vrf.build_zsf(train.labels, train.logits_zs, train.logits_ft,
                          train.features_ft, p_percent=10.0)
    config = vrf.EnsembleConfig(weight_fn=vrf.WeightFunction.constant(0.5))
    if index.is_empty:
        probs, preds = vrf.ose(0.5, manifest.load_split("test").logits_zs,
                               manifest.load_split("test").logits_ft)
        assert probs.shape == (12, 3)
    else:
        result = vrf.vrf_pipeline(manifest, "test", index, config)
        assert 0.0 <= result.accuracy <= 1.0
        assert result.n == 12
