"""The extraction pipeline: images -> tensors + manifest entry."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datasets import batches, enumerate_images
from .formats import DTYPE_FLOAT32, DTYPE_UINT32, upsert_manifest, write_tensor
from .job import ExtractionJob
from .models import ModelRunner

TENSOR_FIELDS = ("features_zs", "features_ft", "logits_zs", "logits_ft", "labels")


def extract(job: ExtractionJob):
    """Run both models over the dataset and emit one split.

    Returns a summary dict. Output rows follow the deterministic dataset
    order (classes sorted, files sorted within class), so the same job
    always produces byte-identical files.
    """
    job.validate()
    class_names, samples = enumerate_images(job.dataset_dir)
    num_classes = len(class_names)

    zs = ModelRunner(job.zs_checkpoint, job.zs_class_embeddings)
    ft = ModelRunner(job.ft_checkpoint, job.ft_class_embeddings)

    chunks = {name: [] for name in TENSOR_FIELDS}
    for images, labels in batches(samples, job.batch_size, job.image_size,
                                  job.mean, job.std):
        f_zs, l_zs = zs.run(images)
        f_ft, l_ft = ft.run(images)
        chunks["features_zs"].append(f_zs)
        chunks["features_ft"].append(f_ft)
        chunks["logits_zs"].append(l_zs)
        chunks["logits_ft"].append(l_ft)
        chunks["labels"].append(labels)

    arrays = {name: np.concatenate(parts) for name, parts in chunks.items()}
    for name in ("logits_zs", "logits_ft"):
        if arrays[name].shape[1] != num_classes:
            raise ValueError(
                f"{name} has {arrays[name].shape[1]} columns but the dataset "
                f"defines {num_classes} classes")

    out_dir = Path(job.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entry = {"name": job.split_name, "role": job.split_role}
    for name in TENSOR_FIELDS:
        rel = f"{job.split_name}.{name}.vrf"
        dtype = DTYPE_UINT32 if name == "labels" else DTYPE_FLOAT32
        write_tensor(out_dir / rel, arrays[name], dtype)
        entry[name] = rel
    manifest_path = upsert_manifest(out_dir / "manifest.json", num_classes, entry)

    record = dict(job.to_record(), class_names=class_names, n=len(samples))
    with open(out_dir / f"{job.split_name}.job.json", "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2)
        f.write("\n")

    return {
        "manifest": str(manifest_path),
        "split": job.split_name,
        "n": len(samples),
        "num_classes": num_classes,
        "feature_dims": {"zs": int(arrays["features_zs"].shape[1]),
                         "ft": int(arrays["features_ft"].shape[1])},
    }
