"""Synthetic dataset and residual-stream generators.

The dataset generator plants the structure the rest of the toolkit is
designed to exploit: every sample sits on an arc between a "failure
region" (where the fine-tuned model is right and the zero-shot model is
wrong) and a far "zero-shot-competent region" (the reverse). Distance to
the planted failure set therefore grows along the arc while the
ft-vs-zs accuracy ratio falls, and sample-wise weighting provably beats
any constant mix on pools drawn from both ends.

Everything is drawn from a counter-based Philox stream in a fixed order,
so a given spec reproduces byte-identical files on any host and thread
count. The RNG algorithm identifier is recorded in the spec sidecar.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .tensor_io import DTYPE_FLOAT32, DTYPE_UINT32, save_manifest, write_tensor

RNG_ALGORITHM = "numpy-philox4x64-10"


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the planted-structure generator. Defaults are desk scale."""

    n_train: int = 5000
    n_id_test: int = 2000
    n_ood_test: int = 2000
    dim: int = 32
    num_classes: int = 10
    seed: int = 20240
    # Fraction of training samples planted as zero-shot failures.
    zsf_fraction: float = 0.3
    # Stretches the arc between the two regions; 0 keeps them a quarter
    # turn apart, larger values push toward antipodal.
    ood_distance_shift: float = 0.6
    feature_noise_zs: float = 0.08
    feature_noise_ft: float = 0.08
    # Per-model correctness probabilities at the near (failure-region)
    # and far (zero-shot-competent) ends of the arc.
    zs_correct_near: float = 0.05
    zs_correct_far: float = 0.95
    ft_correct_near: float = 0.98
    ft_correct_far: float = 0.45
    confidence_lo: float = 0.55
    confidence_hi: float = 0.95
    logit_noise: float = 0.02
    n_ood_splits: int = 1

    def validate(self):
        if self.dim < 2:
            raise ValidationError("need dim >= 2 to place class arcs")
        if self.num_classes < 2:
            raise ValidationError("need at least 2 classes")
        if min(self.n_train, self.n_id_test, self.n_ood_test) < 1:
            raise ValidationError("split sizes must be positive")
        if not 0.0 <= self.zsf_fraction < 1.0:
            raise ValidationError("zsf_fraction must be in [0, 1)")
        if not 0.5 <= self.confidence_lo <= self.confidence_hi < 1.0:
            raise ValidationError("confidence range must satisfy 0.5 <= lo <= hi < 1")
        for p in (self.zs_correct_near, self.zs_correct_far,
                  self.ft_correct_near, self.ft_correct_far):
            if not 0.0 <= p <= 1.0:
                raise ValidationError("correctness probabilities must be in [0, 1]")
        if self.n_ood_splits < 1:
            raise ValidationError("need at least one ood split")

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        doc.pop("rng", None)
        try:
            spec = cls(**doc)
        except TypeError as e:
            raise ValidationError(f"bad synth spec {path}: {e}") from e
        spec.validate()
        return spec


def _arc_angle(spec):
    return min(math.pi, (math.pi / 2.0) * (1.0 + spec.ood_distance_shift))


def _class_frames(rng, spec):
    """An orthonormal (start, end) direction pair per class."""
    e1 = rng.standard_normal((spec.num_classes, spec.dim))
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    raw = rng.standard_normal((spec.num_classes, spec.dim))
    raw -= np.einsum("ij,ij->i", raw, e1)[:, None] * e1
    return e1, raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _wrong_classes(rng, labels, num_classes):
    wrong = rng.integers(0, num_classes - 1, size=len(labels))
    return wrong + (wrong >= labels)


def _logits_for(rng, spec, predicted):
    n = len(predicted)
    conf = rng.uniform(spec.confidence_lo, spec.confidence_hi, size=n)
    probs = np.full((n, spec.num_classes), 0.0)
    probs[:] = ((1.0 - conf) / (spec.num_classes - 1))[:, None]
    probs[np.arange(n), predicted] = conf
    logits = np.log(probs) + spec.logit_noise * rng.standard_normal(probs.shape)
    return logits.astype(np.float32)


def _unit_rows(x):
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def _generate_split(rng, spec, frames, n, t_beta, planted_fraction=None):
    """Draw one split; the draw order is fixed so streams stay reproducible."""
    if t_beta is None:
        t = rng.random(n)
    else:
        t = rng.beta(t_beta[0], t_beta[1], size=n)
    labels = rng.integers(0, spec.num_classes, size=n).astype(np.uint32)

    p_zs = spec.zs_correct_near + (spec.zs_correct_far - spec.zs_correct_near) * t
    p_ft = spec.ft_correct_near + (spec.ft_correct_far - spec.ft_correct_near) * t
    zs_draw = rng.random(n)
    ft_draw = rng.random(n)
    if planted_fraction is None:
        zs_correct = zs_draw < p_zs
        ft_correct = ft_draw < p_ft
    else:
        # Training split: the lowest-t samples are forced zero-shot
        # failures; everything else keeps the zero-shot model correct so
        # failure-set membership is exactly the planted set.
        m = int(round(planted_fraction * n))
        planted = np.zeros(n, dtype=bool)
        planted[np.argsort(t, kind="stable")[:m]] = True
        zs_correct = ~planted
        ft_correct = planted | (ft_draw < p_ft)

    labels_i = labels.astype(np.int64)
    zs_pred = np.where(zs_correct, labels_i, _wrong_classes(rng, labels_i, spec.num_classes))
    ft_pred = np.where(ft_correct, labels_i, _wrong_classes(rng, labels_i, spec.num_classes))

    logits_zs = _logits_for(rng, spec, zs_pred)
    logits_ft = _logits_for(rng, spec, ft_pred)

    e_start, e_end = frames
    theta = (t * _arc_angle(spec))[:, None]
    base = np.cos(theta) * e_start[labels_i] + np.sin(theta) * e_end[labels_i]
    features_zs = _unit_rows(base + spec.feature_noise_zs * rng.standard_normal(base.shape))
    features_ft = _unit_rows(base + spec.feature_noise_ft * rng.standard_normal(base.shape))

    return {
        "features_zs": features_zs,
        "features_ft": features_ft,
        "logits_zs": logits_zs,
        "logits_ft": logits_ft,
        "labels": labels,
        "t": t,
        "planted": planted if planted_fraction is not None else None,
    }


_ID_BETA = (1.3, 1.7)   # test/val pools lean toward the failure region
_OOD_BETA = (2.4, 1.2)  # shifted pools lean toward the zero-shot region


def generate_dataset(spec: SynthSpec, out_dir):
    """Write tensors, manifest, and spec sidecar; return the manifest path."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.Generator(np.random.Philox(spec.seed))
    frames = _class_frames(rng, spec)

    plan = [("train", "id-train", spec.n_train, None, spec.zsf_fraction),
            ("val", "id-val", spec.n_id_test, _ID_BETA, None),
            ("test", "id-test", spec.n_id_test, _ID_BETA, None)]
    for j in range(spec.n_ood_splits):
        name = "shift" if spec.n_ood_splits == 1 else f"shift{j + 1}"
        plan.append((name, "ood-test", spec.n_ood_test, _OOD_BETA, None))

    entries = []
    for name, role, n, beta, planted_fraction in plan:
        data = _generate_split(rng, spec, frames, n, beta, planted_fraction)
        entry = {"name": name, "role": role}
        for field_name, dtype in (("features_zs", DTYPE_FLOAT32),
                                  ("features_ft", DTYPE_FLOAT32),
                                  ("logits_zs", DTYPE_FLOAT32),
                                  ("logits_ft", DTYPE_FLOAT32),
                                  ("labels", DTYPE_UINT32)):
            rel = f"{name}.{field_name}.vrf"
            write_tensor(out_dir / rel, data[field_name], dtype)
            entry[field_name] = rel
        entries.append(entry)

    manifest_path = save_manifest(out_dir / "manifest.json", spec.num_classes, entries)
    sidecar = dict(asdict(spec), rng=RNG_ALGORITHM)
    with open(out_dir / "synth_spec.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")
    return manifest_path


def generate_residual_pair(n, var_zs, var_ft, corr, seed):
    """Two jointly Gaussian residual streams with the requested moments.

    The 2x2 Cholesky factor is written out explicitly so degenerate
    requests (zero variance, |corr| = 1) stay well defined.
    """
    if var_zs < 0 or var_ft < 0:
        raise ValidationError("variances must be non-negative")
    if not -1.0 <= corr <= 1.0:
        raise ValidationError(f"correlation must be in [-1, 1], got {corr}")
    if n < 1:
        raise ValidationError("need at least one sample")
    cov = corr * math.sqrt(var_zs * var_ft)
    z = np.random.Generator(np.random.Philox(seed)).standard_normal((n, 2))
    l11 = math.sqrt(var_zs)
    if l11 > 0:
        l21 = cov / l11
        l22 = math.sqrt(max(var_ft - l21 * l21, 0.0))
    else:
        l21, l22 = 0.0, math.sqrt(var_ft)
    eta_zs = l11 * z[:, 0]
    eta_ft = l21 * z[:, 0] + l22 * z[:, 1]
    return eta_zs, eta_ft
