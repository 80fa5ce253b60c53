"""Versioned checkpoint files: JSON tensor manifest plus a raw float32 blob.

Layout on disk: the magic line, a little-endian uint64 giving the manifest
byte length, the manifest JSON, then every tensor's data concatenated as
little-endian float32. Parameter names keep their "backbone."/"adapter."
prefixes so either group can be extracted on its own.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .adapters import AdapterConfig
from .unet import DenoiserModel, UNetConfig

__all__ = [
    "MAGIC",
    "save_checkpoint",
    "load_checkpoint",
    "read_manifest",
    "manifest_group_sums",
]

MAGIC = b"LDIF-CKPT-1\n"


def _model_meta(model: DenoiserModel) -> dict:
    return {
        "mode": model.mode,
        "num_classes": model.num_classes,
        "unet": asdict(model.config),
        "adapter": asdict(model.adapter_config) if model.adapter_config else None,
    }


def save_checkpoint(model: DenoiserModel, path) -> None:
    """Write the model's parameters and reconstruction metadata to ``path``."""
    entries = []
    blobs = []
    offset = 0
    for name, p in model.named_parameters():
        data = p.detach().to(torch.float32).contiguous().numpy().astype("<f4")
        entries.append({
            "name": name,
            "shape": list(p.shape),
            "dtype": "float32",
            "byte_offset": offset,
        })
        blobs.append(data.tobytes())
        offset += len(blobs[-1])
    manifest = {"format": MAGIC.decode().strip(), "meta": _model_meta(model), "tensors": entries}
    payload = json.dumps(manifest).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def read_manifest(path) -> dict:
    """Parse and validate the manifest; raises on wrong magic or truncation."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: bad magic, not a checkpoint file")
    header_end = len(MAGIC) + 8
    if len(raw) < header_end:
        raise ValueError(f"{path}: truncated header")
    (length,) = struct.unpack("<Q", raw[len(MAGIC):header_end])
    if len(raw) < header_end + length:
        raise ValueError(f"{path}: truncated manifest")
    manifest = json.loads(raw[header_end:header_end + length])
    blob_size = len(raw) - header_end - length
    need = max((e["byte_offset"] + 4 * int(np.prod(e["shape"], dtype=np.int64))
                for e in manifest["tensors"]), default=0)
    if blob_size < need:
        raise ValueError(f"{path}: truncated tensor blob ({blob_size} < {need} bytes)")
    return manifest


def _build_model(meta: dict) -> DenoiserModel:
    unet_cfg = UNetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["unet"].items()})
    adapter_cfg = AdapterConfig(**meta["adapter"]) if meta.get("adapter") else None
    return DenoiserModel(unet_cfg, mode=meta["mode"], adapter_config=adapter_cfg,
                         num_classes=meta.get("num_classes"))


def load_checkpoint(path) -> DenoiserModel:
    """Rebuild the model described by the manifest and fill in its parameters."""
    manifest = read_manifest(path)
    raw = Path(path).read_bytes()
    blob_start = len(MAGIC) + 8 + struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])[0]
    blob = raw[blob_start:]
    model = _build_model(manifest["meta"])
    params = dict(model.named_parameters())
    seen = set()
    with torch.no_grad():
        for entry in manifest["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if entry["dtype"] != "float32":
                raise ValueError(f"{path}: unsupported dtype {entry['dtype']!r}")
            if name not in params:
                raise ValueError(f"{path}: unknown parameter {name!r}")
            p = params[name]
            if tuple(p.shape) != shape:
                raise ValueError(f"{path}: shape mismatch for {name!r}: {shape} vs {tuple(p.shape)}")
            count = int(np.prod(shape, dtype=np.int64))
            start = entry["byte_offset"]
            arr = np.frombuffer(blob[start:start + 4 * count], dtype="<f4").reshape(shape)
            p.copy_(torch.from_numpy(arr.copy()))
            seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ValueError(f"{path}: checkpoint missing parameters: {sorted(missing)[:4]}...")
    return model


def manifest_group_sums(manifest: dict) -> dict[str, int]:
    """Total element counts per top-level parameter group, from shapes alone."""
    sums: dict[str, int] = {}
    for entry in manifest["tensors"]:
        group = entry["name"].split(".")[0]
        sums[group] = sums.get(group, 0) + int(np.prod(entry["shape"], dtype=np.int64))
    return sums
