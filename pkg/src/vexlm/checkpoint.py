"""Checkpoint IO: a JSON manifest plus a flat little-endian tensor blob.

The manifest records the model config, tensor layout, old/new embedding
boundary, stage id, step count, the tokenizer file hash, and the subword
decompositions used at expansion time. Loading validates every shape and
the blob length against the manifest. Writes are atomic (temp + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams

CHECKPOINT_FORMAT_VERSION = 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, ensure_ascii=False).encode("utf-8")).hexdigest()


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(
    path_prefix,
    params: ModelParams,
    config: ModelConfig,
    stage_id: int,
    step_count: int,
    tokenizer_hash: str,
    decompositions: dict[int, list[int]] | None = None,
) -> tuple[Path, Path]:
    """Write ``<prefix>.json`` and ``<prefix>.bin``; returns both paths."""
    prefix = Path(path_prefix)
    blob = bytearray()
    tensors = []
    for name in params.names():
        arr = params.tensors[name]
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str.lstrip("<>=|"),
            "offset": len(blob),
            "nbytes": len(raw),
        })
        blob.extend(raw)

    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config.to_dict(),
        "tensors": tensors,
        "base_size": params.base_size,
        "lora_scale": params.lora_scale,
        "stage_id": stage_id,
        "step_count": step_count,
        "tokenizer_sha256": tokenizer_hash,
        "decompositions": {str(k): list(v) for k, v in (decompositions or {}).items()},
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
    }
    manifest_path = prefix.with_suffix(".json")
    blob_path = prefix.with_suffix(".bin")
    atomic_write_bytes(blob_path, bytes(blob))
    atomic_write_text(manifest_path, json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path, blob_path


def load_checkpoint(path_prefix) -> tuple[ModelParams, ModelConfig, dict]:
    """Read a checkpoint pair; validates shapes, sizes, and the blob hash."""
    prefix = Path(path_prefix)
    with open(prefix.with_suffix(".json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {manifest.get('format_version')}")
    with open(prefix.with_suffix(".bin"), "rb") as f:
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ValueError("checkpoint blob hash mismatch")

    tensors: dict[str, np.ndarray] = {}
    for spec in manifest["tensors"]:
        dtype = np.dtype("<" + spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        if count * dtype.itemsize != spec["nbytes"]:
            raise ValueError(f"tensor {spec['name']}: byte count does not match shape")
        raw = blob[spec["offset"] : spec["offset"] + spec["nbytes"]]
        tensors[spec["name"]] = np.frombuffer(raw, dtype=dtype).reshape(spec["shape"]).copy()

    config = ModelConfig(**manifest["config"])
    if tensors["in_embed"].shape != (config.vocab_size, config.d_model):
        raise ValueError("in_embed shape does not match config")
    if tensors["out_embed"].shape != (config.vocab_size, config.d_model):
        raise ValueError("out_embed shape does not match config")
    params = ModelParams(tensors=tensors, base_size=manifest["base_size"], lora_scale=manifest.get("lora_scale", 0.0))
    meta = {
        "stage_id": manifest["stage_id"],
        "step_count": manifest["step_count"],
        "tokenizer_sha256": manifest["tokenizer_sha256"],
        "decompositions": {int(k): v for k, v in manifest.get("decompositions", {}).items()},
    }
    return params, config, meta
