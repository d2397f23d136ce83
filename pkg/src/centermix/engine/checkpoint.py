"""Single-file parameter checkpoints.

Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON
header, then the raw little-endian float32 payloads concatenated in
header order. The header records format version, parameter names and
shapes, the dtype, and free-form metadata (model config, router
registry).
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..exceptions import ContractError
from .tensor import Tensor

FORMAT_VERSION = 1


def save_params(path, params: dict, meta: dict | None = None) -> None:
    entries = []
    payloads = []
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.dtype != np.float32:
            raise ContractError(f"checkpoints store float32 payloads; '{name}' is {arr.dtype}")
        entries.append({"name": name, "shape": list(arr.shape)})
        payloads.append(np.ascontiguousarray(arr).astype("<f4").tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32",
        "params": entries,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=False, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in payloads:
            fh.write(chunk)


def load_params(path) -> tuple[OrderedDict, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ContractError(f"unsupported checkpoint format: {header.get('format_version')}")
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise ContractError(f"truncated payload for '{entry['name']}'")
            out[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    return out, header.get("meta", {})


def load_into(path, params: dict) -> dict:
    """Load a checkpoint into an existing name -> Tensor mapping."""
    arrays, meta = load_params(path)
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ContractError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, arr in arrays.items():
        t = params[name]
        if t.data.shape != arr.shape:
            raise ContractError(f"shape mismatch for '{name}': {t.data.shape} vs {arr.shape}")
        t.data = arr.astype(t.data.dtype)
    return meta
