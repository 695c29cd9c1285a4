"""Binary tensor files and the dataset manifest.

File layout (all integers little-endian, no padding, no checksum):

    [magic 'VRF1'][dtype u8][rank u8][dims: rank x u64][payload row-major]

dtype 1 is 32-bit float, dtype 2 is 32-bit unsigned int. Rank is 1 or 2.
The payload length must equal prod(dims) * itemsize exactly; anything
else is rejected. The same bytes parse identically on any host.

The manifest is a JSON document tying together per-split tensor files:

    {"num_classes": int,
     "splits": [{"name": str, "role": str,
                 "features_zs": str, "features_ft": str,
                 "logits_zs": str, "logits_ft": str, "labels": str}]}

Paths are relative to the manifest's directory. Structure is validated
eagerly; tensors are loaded (and cross-checked against num_classes)
lazily per split, so evaluating one split of a multi-gigabyte dataset
never touches the others.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError, TensorFormatError

MAGIC = b"VRF1"
DTYPE_FLOAT32 = 1
DTYPE_UINT32 = 2

_NUMPY_DTYPES = {
    DTYPE_FLOAT32: np.dtype("<f4"),
    DTYPE_UINT32: np.dtype("<u4"),
}

SPLIT_ROLES = ("id-train", "id-val", "id-test", "ood-test")

_SPLIT_KEYS = (
    "name",
    "role",
    "features_zs",
    "features_ft",
    "logits_zs",
    "logits_ft",
    "labels",
)


def write_tensor(path, values, dtype_code=None):
    """Write a 1- or 2-d array to ``path`` in the binary tensor format.

    ``dtype_code`` defaults to DTYPE_FLOAT32 for float arrays and
    DTYPE_UINT32 for integer arrays. Values are cast to the storage
    dtype; a float32-in/float32-out round trip is bit exact.
    """
    arr = np.asarray(values)
    if arr.ndim not in (1, 2):
        raise TensorFormatError(f"unsupported rank {arr.ndim}; only 1 or 2 allowed")
    if dtype_code is None:
        dtype_code = DTYPE_UINT32 if arr.dtype.kind in "ui" else DTYPE_FLOAT32
    if dtype_code not in _NUMPY_DTYPES:
        raise TensorFormatError(f"unsupported dtype code {dtype_code}")
    arr = np.ascontiguousarray(arr.astype(_NUMPY_DTYPES[dtype_code], copy=False))
    header = MAGIC + struct.pack("<BB", dtype_code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes(order="C"))


def read_tensor(path):
    """Read a tensor file, returning ``(array, dtype_code)``.

    Raises TensorFormatError on bad magic, unknown dtype/rank, a header
    that does not fit, or a payload whose length disagrees with the
    declared dims (truncated or trailing bytes).
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise TensorFormatError(f"cannot read {path}: {e}") from e

    if len(blob) < 6:
        raise TensorFormatError(f"{path}: file shorter than fixed header")
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    dtype_code, rank = struct.unpack_from("<BB", blob, 4)
    if dtype_code not in _NUMPY_DTYPES:
        raise TensorFormatError(f"{path}: unknown dtype code {dtype_code}")
    if rank not in (1, 2):
        raise TensorFormatError(f"{path}: unsupported rank {rank}")
    dims_end = 6 + 8 * rank
    if len(blob) < dims_end:
        raise TensorFormatError(f"{path}: truncated dims header")
    dims = struct.unpack_from(f"<{rank}Q", blob, 6)

    dtype = _NUMPY_DTYPES[dtype_code]
    count = 1
    for d in dims:
        count *= d
    expected = count * dtype.itemsize
    actual = len(blob) - dims_end
    if actual != expected:
        kind = "truncated" if actual < expected else "oversized"
        raise TensorFormatError(
            f"{path}: {kind} payload, dims {dims} need {expected} bytes, got {actual}"
        )
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=dims_end)
    return arr.reshape(dims), dtype_code


@dataclass(frozen=True)
class SplitSpec:
    """One manifest entry; paths already resolved against the manifest dir."""

    name: str
    role: str
    features_zs: Path
    features_ft: Path
    logits_zs: Path
    logits_ft: Path
    labels: Path
    num_classes: int

    def tensor_paths(self):
        return (
            self.features_zs,
            self.features_ft,
            self.logits_zs,
            self.logits_ft,
            self.labels,
        )


@dataclass
class SplitTensors:
    """Aligned tensors for one split, dimension-checked on load."""

    name: str
    role: str
    features_zs: np.ndarray
    features_ft: np.ndarray
    logits_zs: np.ndarray
    logits_ft: np.ndarray
    labels: np.ndarray

    @property
    def n(self):
        return self.labels.shape[0]

    def outputs(self, model_tag):
        """The (features, logits) pair of one model as a ModelOutputs."""
        from .core import ModelOutputs

        if model_tag == "zs":
            return ModelOutputs(self.features_zs, self.logits_zs, "zs")
        if model_tag == "ft":
            return ModelOutputs(self.features_ft, self.logits_ft, "ft")
        raise ManifestError(f"unknown model tag {model_tag!r}")


@dataclass
class DatasetManifest:
    """Validated manifest with lazy, cached per-split tensor loading."""

    path: Path
    num_classes: int
    splits: dict[str, SplitSpec]
    _cache: dict[str, SplitTensors] = field(default_factory=dict, repr=False)

    def split_names(self, roles=None):
        if roles is None:
            return list(self.splits)
        return [s.name for s in self.splits.values() if s.role in roles]

    def split(self, name) -> SplitSpec:
        if name not in self.splits:
            raise ManifestError(f"no split named {name!r} in {self.path}")
        return self.splits[name]

    def single_split(self, role) -> SplitSpec:
        names = self.split_names(roles=(role,))
        if len(names) != 1:
            raise ManifestError(
                f"expected exactly one {role} split, found {len(names)}"
            )
        return self.splits[names[0]]

    def load_split(self, name) -> SplitTensors:
        if name in self._cache:
            return self._cache[name]
        spec = self.split(name)
        fzs, code = read_tensor(spec.features_zs)
        _require(code == DTYPE_FLOAT32 and fzs.ndim == 2, spec, "features_zs must be a float32 matrix")
        fft, code = read_tensor(spec.features_ft)
        _require(code == DTYPE_FLOAT32 and fft.ndim == 2, spec, "features_ft must be a float32 matrix")
        lzs, code = read_tensor(spec.logits_zs)
        _require(code == DTYPE_FLOAT32 and lzs.ndim == 2, spec, "logits_zs must be a float32 matrix")
        lft, code = read_tensor(spec.logits_ft)
        _require(code == DTYPE_FLOAT32 and lft.ndim == 2, spec, "logits_ft must be a float32 matrix")
        labels, code = read_tensor(spec.labels)
        _require(code == DTYPE_UINT32 and labels.ndim == 1, spec, "labels must be a uint32 vector")

        n = labels.shape[0]
        for arr, field_name in ((fzs, "features_zs"), (fft, "features_ft"),
                                (lzs, "logits_zs"), (lft, "logits_ft")):
            if arr.shape[0] != n:
                raise ManifestError(
                    f"split {spec.name!r}: {field_name} has {arr.shape[0]} rows, labels have {n}"
                )
        for arr, field_name in ((lzs, "logits_zs"), (lft, "logits_ft")):
            if arr.shape[1] != self.num_classes:
                raise ManifestError(
                    f"split {spec.name!r}: {field_name} has {arr.shape[1]} columns, "
                    f"num_classes is {self.num_classes}"
                )
        if n > 0 and int(labels.max()) >= self.num_classes:
            raise ManifestError(
                f"split {spec.name!r}: label {int(labels.max())} out of range "
                f"for num_classes {self.num_classes}"
            )
        tensors = SplitTensors(spec.name, spec.role, fzs, fft, lzs, lft, labels)
        self._cache[name] = tensors
        return tensors


def _require(cond, spec, message):
    if not cond:
        raise ManifestError(f"split {spec.name!r}: {message}")


def load_manifest(path) -> DatasetManifest:
    """Parse and structurally validate a manifest JSON document.

    Checks performed eagerly: schema shape, known roles, unique split
    names, exactly one id-train split, at least one id-val split, and
    existence of every referenced tensor file. Dimension cross-checks
    happen on first load of each split.
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e

    if not isinstance(doc, dict):
        raise ManifestError(f"manifest {path}: top level must be an object")
    num = doc.get("num_classes")
    if not isinstance(num, int) or isinstance(num, bool) or num < 1:
        raise ManifestError(f"manifest {path}: num_classes must be a positive integer")
    if not isinstance(doc.get("splits"), list) or not doc["splits"]:
        raise ManifestError(f"manifest {path}: splits must be a non-empty list")

    num_classes = num
    base = path.parent
    splits: dict[str, SplitSpec] = {}
    for i, entry in enumerate(doc["splits"]):
        if not isinstance(entry, dict):
            raise ManifestError(f"manifest {path}: splits[{i}] must be an object")
        missing = [k for k in _SPLIT_KEYS if k not in entry]
        if missing:
            raise ManifestError(f"manifest {path}: splits[{i}] missing keys {missing}")
        for k in _SPLIT_KEYS:
            if not isinstance(entry[k], str):
                raise ManifestError(f"manifest {path}: splits[{i}].{k} must be a string")
        name = entry["name"]
        role = entry["role"]
        if role not in SPLIT_ROLES:
            raise ManifestError(
                f"manifest {path}: split {name!r} has unknown role {role!r}"
            )
        if name in splits:
            raise ManifestError(f"manifest {path}: duplicate split name {name!r}")
        spec = SplitSpec(
            name=name,
            role=role,
            features_zs=base / entry["features_zs"],
            features_ft=base / entry["features_ft"],
            logits_zs=base / entry["logits_zs"],
            logits_ft=base / entry["logits_ft"],
            labels=base / entry["labels"],
            num_classes=num_classes,
        )
        for p in spec.tensor_paths():
            if not p.is_file():
                raise ManifestError(
                    f"manifest {path}: split {name!r} references missing file {p}"
                )
        splits[name] = spec

    roles = [s.role for s in splits.values()]
    if roles.count("id-train") != 1:
        raise ManifestError(
            f"manifest {path}: need exactly one id-train split, found {roles.count('id-train')}"
        )
    if roles.count("id-val") < 1:
        raise ManifestError(f"manifest {path}: need at least one id-val split")

    return DatasetManifest(path=path, num_classes=num_classes, splits=splits)


def save_manifest(path, num_classes, split_entries):
    """Write a manifest document. ``split_entries`` holds relative path strings."""
    doc = {"num_classes": int(num_classes), "splits": list(split_entries)}
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    return path
