"""Writers for the consumer's on-disk formats.

The tensor layout is deliberately small enough to emit by hand:

    [magic 'VRF1'][dtype u8][rank u8][dims: rank x u64 LE][payload row-major LE]

dtype 1 = float32, dtype 2 = uint32. The manifest is a JSON document with
top-level num_classes and a list of split records whose paths are
relative to the manifest's directory.
"""

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"VRF1"
DTYPE_FLOAT32 = 1
DTYPE_UINT32 = 2

_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_UINT32: np.dtype("<u4")}


def write_tensor(path, values, dtype_code):
    """Atomic write: temp file in the same directory, then rename."""
    arr = np.ascontiguousarray(np.asarray(values).astype(_DTYPES[dtype_code]))
    if arr.ndim not in (1, 2):
        raise ValueError(f"tensor rank must be 1 or 2, got {arr.ndim}")
    path = Path(path)
    blob = (MAGIC + struct.pack("<BB", dtype_code, arr.ndim)
            + struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes(order="C"))
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def upsert_manifest(manifest_path, num_classes, entry):
    """Create the manifest or append/replace one split entry in place."""
    manifest_path = Path(manifest_path)
    if manifest_path.exists():
        with open(manifest_path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        if doc.get("num_classes") != num_classes:
            raise ValueError(
                f"manifest has num_classes={doc.get('num_classes')}, "
                f"extraction produced {num_classes}")
        splits = [s for s in doc.get("splits", []) if s.get("name") != entry["name"]]
    else:
        splits = []
    splits.append(entry)
    doc = {"num_classes": int(num_classes), "splits": splits}
    fd, tmp = tempfile.mkstemp(dir=manifest_path.parent, prefix="manifest", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
        os.replace(tmp, manifest_path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return manifest_path
