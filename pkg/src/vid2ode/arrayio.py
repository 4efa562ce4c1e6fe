"""Raw float array files: <name>.f32 payload + <name>.json header."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def save_array(path, arr: np.ndarray, **meta):
    """Write arr as little-endian float32 with a JSON sidecar header."""
    path = Path(path)
    arr = np.asarray(arr)
    path.with_suffix(".f32").write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = {"shape": list(arr.shape), "dtype": "<f4", "order": "C"}
    header.update(meta)
    path.with_suffix(".json").write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")


def load_array(path):
    """Read an array written by save_array; returns (array, header dict)."""
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    raw = np.frombuffer(path.with_suffix(".f32").read_bytes(), dtype=header["dtype"])
    return raw.reshape(header["shape"]).astype(float), header


def write_f32_frame(path, frame: np.ndarray):
    """Bare .f32 frame dump (row-major, little-endian), no header."""
    Path(path).write_bytes(np.ascontiguousarray(frame, dtype="<f4").tobytes())


def read_f32_frame(path, shape):
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    return raw.reshape(shape).astype(float)
