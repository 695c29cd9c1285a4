"""Checkpoint loading and per-batch inference.

A checkpoint is a TorchScript module. Two calling conventions are
accepted, detected from the output of a probe batch:

  pair      forward(images) -> (features B x D, logits B x K)
  features  forward(images) -> features B x D; logits are then cosine
            scores against a job-supplied K x D class-embedding matrix
            (for zero-shot heads this matrix is the text encoder's
            embedding of the prompt-expanded class names)

Features are always L2-normalized before use; logits stay pre-softmax.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch


def _normalize_rows(arr, what="encoder features"):
    arr = np.asarray(arr, dtype=np.float64)
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if arr.shape[0] and norms.min() <= 0:
        raise ValueError(f"{what} contain a zero-norm row")
    return (arr / norms).astype(np.float32)


class ModelRunner:
    def __init__(self, checkpoint_path, class_embeddings_path=None):
        self.module = torch.jit.load(str(Path(checkpoint_path)), map_location="cpu")
        self.module.eval()
        self.head = None
        if class_embeddings_path is not None:
            head = np.load(class_embeddings_path)
            if head.ndim != 2:
                raise ValueError("class embeddings must be a K x D matrix")
            self.head = _normalize_rows(head, what="class embeddings")

    def run(self, images):
        """Returns (unit-norm features, raw logits) as float32 arrays."""
        with torch.no_grad():
            out = self.module(torch.from_numpy(images))
        if isinstance(out, (tuple, list)):
            if len(out) != 2:
                raise ValueError(f"checkpoint returned {len(out)} outputs, expected 2")
            features, logits = (t.cpu().numpy() for t in out)
        else:
            features = out.cpu().numpy()
            if self.head is None:
                raise ValueError(
                    "checkpoint emits features only; provide class embeddings "
                    "to form logits")
            logits = None
        features = _normalize_rows(features)
        if logits is None:
            if self.head.shape[1] != features.shape[1]:
                raise ValueError(
                    f"class embeddings are {self.head.shape[1]}-dim but features "
                    f"are {features.shape[1]}-dim")
            logits = features @ self.head.T
        return features, np.asarray(logits, dtype=np.float32)
