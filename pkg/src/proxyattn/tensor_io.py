"""Tensor disk format: a JSON sidecar next to a raw little-endian buffer.

A tensor named `x` is stored as `x.json` + `x.bin`.  The sidecar carries
{"shape": [...], "dtype": "f64", "order": "row-major"} plus any extra
caller metadata; the .bin file holds the flat row-major float64 buffer.
A single-file pure-JSON variant (nested lists under a "data" key) exists
for small fixtures.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class ShapeMismatchError(ValueError):
    """Declared shape disagrees with the stored buffer (or with the consumer)."""


class DtypeMismatchError(ValueError):
    """Stored dtype is not the supported little-endian float64."""


def _pair_paths(stem) -> tuple[Path, Path]:
    # append rather than with_suffix(): stems may contain dots
    stem = Path(stem)
    return stem.parent / (stem.name + ".json"), stem.parent / (stem.name + ".bin")


def save_tensor(stem, array: np.ndarray, extra: dict | None = None) -> None:
    """Write `<stem>.json` and `<stem>.bin` for a float64 array."""
    json_path, bin_path = _pair_paths(stem)
    arr = np.asarray(array, dtype=np.float64)
    sidecar = {"shape": list(arr.shape), "dtype": "f64", "order": "row-major"}
    if extra:
        sidecar.update(extra)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(sidecar) + "\n")
    bin_path.write_bytes(arr.astype("<f8").tobytes(order="C"))


def load_tensor(stem) -> tuple[np.ndarray, dict]:
    """Read a sidecar+binary pair; returns (array, sidecar metadata)."""
    json_path, bin_path = _pair_paths(stem)
    if not json_path.exists():
        raise FileNotFoundError(f"missing tensor sidecar {json_path}")
    if not bin_path.exists():
        raise FileNotFoundError(f"missing tensor buffer {bin_path}")
    sidecar = json.loads(json_path.read_text())
    _check_dtype(sidecar, json_path)
    shape = tuple(int(s) for s in sidecar["shape"])
    buf = bin_path.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    if len(buf) != expected:
        raise ShapeMismatchError(
            f"{bin_path}: sidecar shape {shape} needs {expected} bytes, file has {len(buf)}"
        )
    arr = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arr, sidecar


def save_tensor_json(path, array: np.ndarray, extra: dict | None = None) -> None:
    """Single-file JSON form: shape + nested `data` lists (test fixtures)."""
    path = Path(path)
    arr = np.asarray(array, dtype=np.float64)
    doc = {"shape": list(arr.shape), "dtype": "f64", "order": "row-major",
           "data": arr.tolist()}
    if extra:
        doc.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc) + "\n")


def load_tensor_json(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing tensor file {path}")
    doc = json.loads(path.read_text())
    _check_dtype(doc, path)
    shape = tuple(int(s) for s in doc["shape"])
    arr = np.asarray(doc["data"], dtype=np.float64)
    if arr.shape != shape:
        raise ShapeMismatchError(f"{path}: declared shape {shape}, data has shape {arr.shape}")
    return arr, doc


def _check_dtype(sidecar: dict, path) -> None:
    dtype = sidecar.get("dtype")
    if dtype != "f64":
        raise DtypeMismatchError(f"{path}: unsupported dtype {dtype!r} (only 'f64')")
