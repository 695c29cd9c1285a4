"""Zero-shot failure set construction and exact k-NN distance queries.

The index holds the fine-tuned-model features of training samples that
the fine-tuned model classifies correctly while the zero-shot model gets
wrong. Queries return the L2 distance to the k-th nearest member, which
for unit-norm features lies in [0, 2].

Query kernel
------------
For unit vectors, ||v - q||^2 = 2 - 2<v, q>, so the k-th smallest
distance is the k-th largest dot product. Scores are computed with a
float32 GEMM (one pass over the member matrix), the k-th order statistic
is taken with a selection (no full sort), and then every candidate whose
float32 score lies within a rounding-error guard band of that statistic
is re-scored in float64 directly. The guard band covers the worst-case
float32 accumulation error, so the returned value always equals the
exact float64 answer; the refinement set is tiny in practice (around k
plus a handful).
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import normalize_features, predict
from .errors import EmptyIndexError, TensorFormatError, ValidationError
from .tensor_io import DTYPE_FLOAT32, read_tensor, write_tensor

DEFAULT_P_PERCENT = 0.1


def scaled_k(p_percent, num_members):
    """k = max(1, floor(p% of the member count)), clamped to the set size.

    The epsilon keeps decimal p values honest when p*M/100 is an exact
    integer in decimal but lands a hair below it in binary.
    """
    if num_members <= 0:
        return 0
    raw = math.floor(p_percent / 100.0 * num_members + 1e-9)
    return min(num_members, max(1, raw))


@dataclass(frozen=True)
class ZsfIndex:
    """Immutable set of unit-norm member rows plus the neighbor rank k."""

    members: np.ndarray          # M x D float32, rows unit norm
    source_indices: np.ndarray   # M original row indices
    k: int
    p_percent: float

    def __post_init__(self):
        if self.members.ndim != 2:
            raise ValidationError("index members must be an M x D matrix")
        if len(self.source_indices) != len(self.members):
            raise ValidationError("source_indices misaligned with members")
        m = len(self.members)
        if m > 0:
            norms = np.linalg.norm(self.members.astype(np.float64), axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-4:
                raise ValidationError("index members must be unit-norm")
            if not (1 <= self.k <= m):
                raise ValidationError(f"k={self.k} out of range for {m} members")
        elif self.k != 0:
            raise ValidationError("empty index must have k=0")

    @property
    def size(self):
        return len(self.members)

    @property
    def dim(self):
        return self.members.shape[1]

    @property
    def is_empty(self):
        return len(self.members) == 0

    def with_k(self, k) -> "ZsfIndex":
        return replace(self, k=int(k))

    @classmethod
    def from_features(cls, features, p_percent=DEFAULT_P_PERCENT, source_indices=None):
        """Build an index over arbitrary feature rows with the p%-scaled k rule."""
        if not (0.0 < p_percent <= 100.0):
            raise ValidationError(f"p_percent must be in (0, 100], got {p_percent}")
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 2:
            raise ValidationError("features must be an N x D matrix")
        if source_indices is None:
            source_indices = np.arange(len(features), dtype=np.int64)
        else:
            source_indices = np.asarray(source_indices, dtype=np.int64)
        members = normalize_features(features) if len(features) else features
        return cls(
            members=members,
            source_indices=source_indices,
            k=scaled_k(p_percent, len(features)),
            p_percent=float(p_percent),
        )


def build_zsf(labels, zs_logits, ft_logits, ft_features, p_percent=DEFAULT_P_PERCENT) -> ZsfIndex:
    """Collect fine-tuned features of rows where ft is right and zs is wrong.

    An empty result is allowed (the index is flagged empty and refuses
    queries); misaligned inputs are an error.
    """
    labels = np.asarray(labels)
    zs_logits = np.asarray(zs_logits)
    ft_logits = np.asarray(ft_logits)
    ft_features = np.asarray(ft_features)
    n = labels.shape[0]
    if not (zs_logits.shape[0] == ft_logits.shape[0] == ft_features.shape[0] == n):
        raise ValidationError("labels, logits and features are misaligned")
    ft_right = predict(ft_logits) == labels
    zs_wrong = predict(zs_logits) != labels
    mask = ft_right & zs_wrong
    idx = np.nonzero(mask)[0].astype(np.int64)
    return ZsfIndex.from_features(ft_features[idx], p_percent, source_indices=idx)


# Worst-case float32 dot-product accumulation error for unit vectors is
# about D * 2^-24; the extra terms cover the query's float64->float32
# cast. Doubled when applied around the selected order statistic.
def _score_error_bound(dim):
    return (dim + 4) * 1.2e-7


def _prepare_queries(index: ZsfIndex, queries):
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != index.dim:
        raise ValidationError(
            f"queries must be N x {index.dim}, got shape {queries.shape}"
        )
    if not np.all(np.isfinite(queries)):
        raise ValidationError("queries contain NaN or Inf")
    norms = np.linalg.norm(queries, axis=1)
    if len(queries) and norms.min() <= 0.0:
        raise ValidationError(f"zero-norm query at row {int(np.argmin(norms))}")
    return queries / norms[:, None]


def _query_block(index: ZsfIndex, q64, out):
    """Exact k-th neighbor distances for one block of normalized queries."""
    members = index.members
    m, k = index.size, index.k
    band = 2.0 * _score_error_bound(index.dim)
    scores = q64.astype(np.float32) @ members.T          # B x M float32
    if k < m:
        kth = np.partition(scores, m - k, axis=1)[:, m - k]
    else:
        kth = scores.min(axis=1)
    for i in range(len(q64)):
        cand = np.nonzero(scores[i] >= kth[i] - band)[0]
        diffs = members[cand].astype(np.float64) - q64[i]
        dist = np.sqrt(np.einsum("ij,ij->i", diffs, diffs))
        out[i] = np.partition(dist, k - 1)[k - 1]
    np.clip(out, 0.0, 2.0, out=out)


def knn_distance_batch(index: ZsfIndex, queries, threads=1):
    """Distance to the k-th nearest member for every query row.

    Exact (not approximate); row order preserved; safe to call from many
    threads since the index is immutable. ``threads`` splits the query
    set across worker threads, each running the same kernel.
    """
    if index.is_empty:
        raise EmptyIndexError("cannot query an empty zero-shot failure index")
    q64 = _prepare_queries(index, queries)
    n = len(q64)
    out = np.empty(n, dtype=np.float64)
    if n == 0:
        return out
    # Cap the float32 score block at ~32 MB.
    block = max(1, (1 << 23) // max(1, index.size))
    spans = [(s, min(s + block, n)) for s in range(0, n, block)]
    if threads and threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda sp: _query_block(index, q64[sp[0]:sp[1]], out[sp[0]:sp[1]]), spans))
    else:
        for s, e in spans:
            _query_block(index, q64[s:e], out[s:e])
    return out


def knn_distance(index: ZsfIndex, query):
    """Scalar form of knn_distance_batch; identical bits to a batch of one."""
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1:
        raise ValidationError("query must be a 1-d vector")
    return float(knn_distance_batch(index, query[None, :])[0])


def save_index(index: ZsfIndex, path):
    """Write members as a tensor file plus a JSON sidecar at <path>.json."""
    path = Path(path)
    write_tensor(path, index.members, DTYPE_FLOAT32)
    sidecar = {
        "k": int(index.k),
        "p_percent": float(index.p_percent),
        "source_indices": [int(i) for i in index.source_indices],
    }
    with open(_sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(sidecar, f)
        f.write("\n")


def load_index(path) -> ZsfIndex:
    path = Path(path)
    members, code = read_tensor(path)
    if code != DTYPE_FLOAT32 or members.ndim != 2:
        raise TensorFormatError(f"{path}: index members must be a float32 matrix")
    try:
        with open(_sidecar_path(path), "r", encoding="utf-8") as f:
            sidecar = json.load(f)
    except OSError as e:
        raise TensorFormatError(f"missing index sidecar for {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise TensorFormatError(f"malformed index sidecar for {path}: {e}") from e
    try:
        k = int(sidecar["k"])
        p_percent = float(sidecar["p_percent"])
        source_indices = np.asarray(sidecar["source_indices"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as e:
        raise TensorFormatError(f"invalid index sidecar for {path}: {e}") from e
    return ZsfIndex(members=members, source_indices=source_indices, k=k, p_percent=p_percent)


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")
