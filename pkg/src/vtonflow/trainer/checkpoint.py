"""Self-describing checkpoints: ``manifest.json`` plus one raw ``tensors.bin``.

Every tensor (model parameters and optimizer moments) is stored as float32
little-endian at a recorded byte offset. The manifest carries the sha256 and
size of the tensor file, a format version and the config hash of the
(model, plan) pair the checkpoint belongs to.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import CompatibilityError, FormatError, IntegrityError, VersionError

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    model_config: dict
    config_hash: str
    stage: str | None = None  # stage the cursor refers to
    step: int = 0  # optimizer steps completed within ``stage``
    completed: list[str] = field(default_factory=list)
    optim: dict[str, dict] = field(default_factory=dict)  # name -> {exp_avg, exp_avg_sq, step}
    rng: dict = field(default_factory=dict)  # counter-based: {"seed", "stage_index", "step"}
    meta: dict = field(default_factory=dict)
    path: str | None = None

    def same_weights(self, other: "Checkpoint") -> bool:
        return self.params.keys() == other.params.keys() and all(
            torch.equal(self.params[k], other.params[k]) for k in self.params)


def _tensor_entries(ckpt: Checkpoint):
    for name, t in ckpt.params.items():
        yield f"param/{name}", t
    for name, st in ckpt.optim.items():
        yield f"exp_avg/{name}", st["exp_avg"]
        yield f"exp_avg_sq/{name}", st["exp_avg_sq"]


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``ckpt`` into directory ``path`` (created if needed). Atomic per file."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    sha = hashlib.sha256()
    tmp_bin = path / "tensors.bin.tmp"
    with open(tmp_bin, "wb") as fh:
        for key, t in _tensor_entries(ckpt):
            arr = t.detach().cpu().to(torch.float32).numpy().astype(_DTYPE, copy=False)
            data = np.ascontiguousarray(arr).tobytes()
            fh.write(data)
            sha.update(data)
            entries.append({"name": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
            offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "config_hash": ckpt.config_hash,
        "model_config": ckpt.model_config,
        "stage": ckpt.stage,
        "step": ckpt.step,
        "completed": list(ckpt.completed),
        "optim_steps": {k: int(v["step"]) for k, v in ckpt.optim.items()},
        "rng": ckpt.rng,
        "meta": ckpt.meta,
        "tensors": entries,
        "tensors_sha256": sha.hexdigest(),
        "tensors_size": offset,
    }
    tmp_manifest = path / "manifest.json.tmp"
    tmp_manifest.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp_bin, path / "tensors.bin")
    os.replace(tmp_manifest, path / "manifest.json")
    ckpt.path = str(path)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"no checkpoint manifest in {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable checkpoint manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(
            f"checkpoint format {manifest.get('format_version')!r}, expected {FORMAT_VERSION}")
    return manifest


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    """Load and verify a checkpoint.

    Raises IntegrityError on a size or digest mismatch of ``tensors.bin`` and
    CompatibilityError when ``expected_hash`` differs from the stored config hash.
    """
    path = Path(path)
    manifest = read_manifest(path)
    if expected_hash is not None and manifest["config_hash"] != expected_hash:
        raise CompatibilityError(
            f"checkpoint config hash {manifest['config_hash'][:12]} does not match {expected_hash[:12]}")
    try:
        blob = (path / "tensors.bin").read_bytes()
    except FileNotFoundError as exc:
        raise IntegrityError(f"missing tensors.bin in {path}") from exc
    if len(blob) != manifest["tensors_size"]:
        raise IntegrityError(f"tensors.bin is {len(blob)} bytes, manifest says {manifest['tensors_size']}")
    if hashlib.sha256(blob).hexdigest() != manifest["tensors_sha256"]:
        raise IntegrityError("tensors.bin digest does not match the manifest")

    params, moments = {}, {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, _DTYPE, count=e["nbytes"] // 4, offset=e["offset"]).reshape(e["shape"])
        tensor = torch.from_numpy(arr.astype(np.float32))
        kind, name = e["name"].split("/", 1)
        if kind == "param":
            params[name] = tensor
        else:
            moments.setdefault(name, {})[kind] = tensor
    optim = {k: {**v, "step": manifest["optim_steps"][k]} for k, v in moments.items()}
    return Checkpoint(
        params=params,
        model_config=manifest["model_config"],
        config_hash=manifest["config_hash"],
        stage=manifest["stage"],
        step=manifest["step"],
        completed=list(manifest["completed"]),
        optim=optim,
        rng=manifest["rng"],
        meta=manifest["meta"],
        path=str(path),
    )
