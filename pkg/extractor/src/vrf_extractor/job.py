"""Extraction job description and validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

SPLIT_ROLES = ("id-train", "id-val", "id-test", "ood-test")

# Standard CLIP preprocessing statistics; override per job if the
# checkpoints were trained with something else.
DEFAULT_MEAN = (0.48145466, 0.4578275, 0.40821073)
DEFAULT_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class ExtractionJob:
    zs_checkpoint: Path
    ft_checkpoint: Path
    dataset_dir: Path
    split_name: str
    split_role: str
    output_dir: Path
    prompt_template: str = "a photo of a {c}"
    batch_size: int = 32
    image_size: int = 224
    mean: tuple = DEFAULT_MEAN
    std: tuple = DEFAULT_STD
    # Optional K x D matrices (.npy). When a checkpoint emits features
    # only, logits are cosine scores against these rows -- typically the
    # text encoder's embeddings of the prompt-expanded class names.
    zs_class_embeddings: Path | None = None
    ft_class_embeddings: Path | None = None

    def validate(self):
        for name in ("zs_checkpoint", "ft_checkpoint"):
            p = getattr(self, name)
            if not Path(p).is_file():
                raise FileNotFoundError(f"{name} not found: {p}")
        if not Path(self.dataset_dir).is_dir():
            raise FileNotFoundError(f"dataset_dir not found: {self.dataset_dir}")
        if self.split_role not in SPLIT_ROLES:
            raise ValueError(f"split_role must be one of {SPLIT_ROLES}")
        if not self.split_name:
            raise ValueError("split_name must be non-empty")
        if self.batch_size < 1 or self.image_size < 2:
            raise ValueError("batch_size and image_size must be positive")
        if "{c}" not in self.prompt_template:
            raise ValueError("prompt_template must contain a {c} placeholder")
        for emb in (self.zs_class_embeddings, self.ft_class_embeddings):
            if emb is not None and not Path(emb).is_file():
                raise FileNotFoundError(f"class embeddings not found: {emb}")
        return self

    @classmethod
    def from_json(cls, path):
        path = Path(path)
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown job fields: {sorted(unknown)}")
        base = path.parent
        for key in ("zs_checkpoint", "ft_checkpoint", "dataset_dir", "output_dir",
                    "zs_class_embeddings", "ft_class_embeddings"):
            if doc.get(key) is not None:
                doc[key] = base / doc[key]
        for key in ("mean", "std"):
            if key in doc:
                doc[key] = tuple(doc[key])
        job = cls(**doc)
        job.validate()
        return job

    def to_record(self):
        """Provenance record written next to the outputs."""
        return {
            "zs_checkpoint": str(self.zs_checkpoint),
            "ft_checkpoint": str(self.ft_checkpoint),
            "dataset_dir": str(self.dataset_dir),
            "split_name": self.split_name,
            "split_role": self.split_role,
            "prompt_template": self.prompt_template,
            "batch_size": self.batch_size,
            "image_size": self.image_size,
            "mean": list(self.mean),
            "std": list(self.std),
        }
