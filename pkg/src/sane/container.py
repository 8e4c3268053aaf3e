"""Directory container for named tensors: ``manifest.json`` + ``tensors.bin``.

The manifest is UTF-8 JSON holding free-form metadata and a tensor table
(name, shape, dtype, byte offset, byte count, CRC32). The blob file is the
concatenation of the tensors' little-endian bytes in table order.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

MANIFEST = "manifest.json"
BLOB = "tensors.bin"
FORMAT_NAME = "sane-container"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}


def dumps_json(obj) -> str:
    """Canonical JSON text used for every file the package writes."""
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def save_container(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            dtype_name = arr.dtype.name
            if dtype_name not in _DTYPES:
                raise FormatError(f"unsupported dtype {dtype_name}", tensor_name=name)
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name]).tobytes()
            fh.write(raw)
            table.append({
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype_name,
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            })
            offset += len(raw)
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "meta": meta or {}, "tensors": table}
    (path / MANIFEST).write_text(dumps_json(manifest), encoding="utf-8")
    return path


def load_container(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; raises :class:`FormatError` on any inconsistency."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"missing {MANIFEST} in {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"unparsable {MANIFEST} in {path}: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"{path} is not a {FORMAT_NAME} directory")
    try:
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing {BLOB} in {path}") from exc

    tensors = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        start, nbytes = entry["offset"], entry["nbytes"]
        if entry["dtype"] not in _DTYPES:
            raise FormatError(f"unsupported dtype {entry['dtype']!r}", tensor_name=name)
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        if start + nbytes > len(blob):
            raise FormatError(f"truncated blob: tensor {name!r} extends past end of file", tensor_name=name)
        raw = blob[start:start + nbytes]
        if zlib.crc32(raw) != entry["crc32"]:
            raise FormatError(f"checksum failure in tensor {name!r}", tensor_name=name)
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if count * dtype.itemsize != nbytes:
            raise FormatError(f"tensor {name!r}: shape {entry['shape']} does not match {nbytes} bytes",
                              tensor_name=name)
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    return tensors, manifest.get("meta", {})
