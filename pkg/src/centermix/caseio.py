"""Case and dataset directory formats.

A case directory holds ``manifest.json`` (dims, spacing, dtype, role ->
filename map, the clinical record, center flag) plus one raw
little-endian float32 file for the image and one uint8 file per mask
role. A dataset directory holds ``manifest.json`` (policy snapshot,
seed, counts, case ids) and a ``cases/`` tree.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .clinical import ClinicalRecord, record_from_json, record_to_json
from .exceptions import ContractError, DimensionError

CASE_MANIFEST = "manifest.json"
FORMAT_VERSION = 1

MASK_ROLES = ("organ", "gtv", "ptv")


def write_case(case_dir, case: dict) -> None:
    """Persist a case mapping (image, masks, record, center, flags)."""
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    image = np.asarray(case["image"], dtype="<f4")
    if image.ndim != 3:
        raise DimensionError(f"case image must be [H,W,S], got {image.shape}")
    roles = {"image": "image.f32"}
    image.tofile(case_dir / roles["image"])
    for role in MASK_ROLES:
        if role not in case:
            continue
        mask = np.asarray(case[role])
        if mask.shape != image.shape:
            raise DimensionError(f"mask '{role}' grid {mask.shape} != image grid {image.shape}")
        roles[role] = f"{role}.u8"
        mask.astype(np.uint8).tofile(case_dir / roles[role])
    manifest = {
        "format_version": FORMAT_VERSION,
        "case_id": case.get("case_id", case_dir.name),
        "dims": list(image.shape),
        "spacing": list(case.get("spacing", (1.0, 1.0, 3.0))),
        "dtype": "float32",
        "roles": roles,
        "center": case.get("center", ""),
        "pni_applied": bool(case.get("pni_applied", False)),
        "record": record_to_json(case["record"]) if isinstance(case.get("record"), ClinicalRecord)
                  else case.get("record"),
    }
    (case_dir / CASE_MANIFEST).write_text(json.dumps(manifest, indent=1))


def read_case(case_dir) -> dict:
    case_dir = Path(case_dir)
    manifest = json.loads((case_dir / CASE_MANIFEST).read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported case format {manifest.get('format_version')}")
    dims = tuple(manifest["dims"])
    count = int(np.prod(dims))
    out = {
        "case_id": manifest["case_id"],
        "spacing": tuple(manifest["spacing"]),
        "center": manifest.get("center", ""),
        "pni_applied": manifest.get("pni_applied", False),
    }
    for role, fname in manifest["roles"].items():
        raw = np.fromfile(case_dir / fname, dtype="<f4" if role == "image" else np.uint8)
        if raw.size != count:
            raise ContractError(f"payload size mismatch for role '{role}' in {case_dir}")
        out[role] = raw.reshape(dims)
    if manifest.get("record"):
        out["record"] = record_from_json(manifest["record"])
    return out


def write_dataset(root, cases: list[dict], meta: dict | None = None) -> None:
    root = Path(root)
    (root / "cases").mkdir(parents=True, exist_ok=True)
    ids = []
    for case in cases:
        cid = case.get("case_id") or f"case{len(ids):04d}"
        ids.append(cid)
        write_case(root / "cases" / cid, case)
    manifest = {"format_version": FORMAT_VERSION, "case_ids": ids, "count": len(ids)}
    if meta:
        manifest.update(meta)
    (root / CASE_MANIFEST).write_text(json.dumps(manifest, indent=1))


def read_dataset(root) -> list[dict]:
    root = Path(root)
    manifest = json.loads((root / CASE_MANIFEST).read_text())
    return [read_case(root / "cases" / cid) for cid in manifest["case_ids"]]


def read_dataset_meta(root) -> dict:
    return json.loads((Path(root) / CASE_MANIFEST).read_text())
