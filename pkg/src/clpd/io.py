"""File formats: float32 arrays with JSON sidecars, 16-bit PGM, checkpoints.

Checkpoint layout: one UTF-8 JSON manifest line terminated by ``\\n``,
followed by the raw little-endian arrays in manifest order::

    {"format": "clpd-checkpoint", "version": 1, "header": {...},
     "arrays": [{"name": ..., "shape": [...], "dtype": "f32"}, ...]}
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "clpd-checkpoint"
_DTYPE_CODES = {"f32": "<f4", "f64": "<f8"}


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_f32(path: str | Path, array: np.ndarray) -> Path:
    """Raw little-endian float32 plus a ``<path>.json`` sidecar with the shape."""
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(arr.tobytes())
    sidecar_path(path).write_text(json.dumps({"shape": list(arr.shape), "dtype": "f32"}))
    return path


def read_f32(path: str | Path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    if meta.get("dtype", "f32") != "f32":
        raise ValueError(f"{path}: unsupported dtype {meta['dtype']!r}")
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: {data.size} values do not fill shape {shape}")
    return data.reshape(shape).astype(np.float32)


def write_pgm16(path: str | Path, image: np.ndarray, lo: float | None = None, hi: float | None = None) -> Path:
    """Binary 16-bit PGM; values are mapped linearly from ``[lo, hi]`` to ``[0, 65535]``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM output needs a 2D image")
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    q = np.clip(np.rint((img - lo) * scale), 0, 65535).astype(">u2")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())
    return path


def read_pgm16(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = fields
    if magic != b"P5" or int(maxval) != 65535:
        raise ValueError(f"{path}: not a 16-bit binary PGM")
    return np.frombuffer(raw[pos:], dtype=">u2").reshape(int(h), int(w)).astype(np.uint16)


def write_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], header: dict | None = None) -> Path:
    entries, blobs = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "f64" if arr.dtype == np.float64 else "f32"
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code})
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())
    manifest = {"format": CHECKPOINT_FORMAT, "version": 1, "header": header or {}, "arrays": entries}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=False).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with Path(path).open("rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        arrays = {}
        for entry in manifest["arrays"]:
            dtype = np.dtype(_DTYPE_CODES[entry["dtype"]])
            count = int(np.prod(entry["shape"], dtype=np.int64))
            buf = fh.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated data for {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return arrays, manifest["header"]
