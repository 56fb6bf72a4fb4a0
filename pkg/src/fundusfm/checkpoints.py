"""Checkpoint store: weight-blob containers with JSON sidecars.

Each checkpoint is an ``.npz`` of numpy blobs keyed by layer path (e.g.
``backbone.layer2.0.conv1.weight``) plus a ``.json`` sidecar carrying regime,
provenance, resolution, epoch, validation metric, config hash, RNG seed, and
a SHA-256 checksum per blob. Loads verify the checksums.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointMissingError, ConfigError, DataError
from .models import ResNetBackbone, derive_seed, seeded_init_

SIDECAR_FIELDS = ("regime", "provenance", "resolution", "epoch", "val_metric",
                  "config_hash", "rng_seed")


def general_checkpoint_id(base_width: int) -> str:
    return f"general_w{base_width}"


def upstream_checkpoint_id(regime: str, resolution: int, base_width: int) -> str:
    if regime not in ("fundus", "general_fundus"):
        raise ConfigError(f"no upstream checkpoint for regime {regime!r}")
    return f"upstream_{regime}_r{resolution}_w{base_width}"


def module_blobs(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """State dict as numpy arrays keyed by (prefixed) layer path."""
    return {prefix + name: tensor.detach().cpu().numpy().copy()
            for name, tensor in module.state_dict().items()}


def bundle_blobs(bundle) -> dict[str, np.ndarray]:
    blobs = {}
    for name, module in bundle.modules().items():
        blobs.update(module_blobs(module, prefix=name + "."))
    return blobs


def blob_checksum(array: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(array.dtype).encode())
    h.update(str(array.shape).encode())
    h.update(np.ascontiguousarray(array).tobytes())
    return h.hexdigest()


def blobs_checksum(blobs: dict[str, np.ndarray]) -> str:
    """Order-independent digest over a set of named blobs."""
    h = hashlib.sha256()
    for key in sorted(blobs):
        h.update(key.encode())
        h.update(blob_checksum(blobs[key]).encode())
    return h.hexdigest()


def module_checksum(module: nn.Module) -> str:
    return blobs_checksum(module_blobs(module))


class CheckpointStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _paths(self, checkpoint_id: str) -> tuple[Path, Path]:
        return (self.root / f"{checkpoint_id}.npz",
                self.root / f"{checkpoint_id}.json")

    def exists(self, checkpoint_id: str) -> bool:
        blob_path, sidecar_path = self._paths(checkpoint_id)
        return blob_path.exists() and sidecar_path.exists()

    def list_ids(self) -> list[str]:
        return sorted(p.stem for p in self.root.glob("*.npz")
                      if (self.root / f"{p.stem}.json").exists())

    def save(self, checkpoint_id: str, blobs: dict[str, np.ndarray],
             meta: dict, overwrite: bool = True) -> None:
        for required in ("regime", "provenance", "resolution"):
            if required not in meta:
                raise ConfigError(f"checkpoint meta missing {required!r}")
        blob_path, sidecar_path = self._paths(checkpoint_id)
        if not overwrite and self.exists(checkpoint_id):
            raise ConfigError(f"checkpoint {checkpoint_id!r} already exists")
        sidecar = {key: meta.get(key) for key in SIDECAR_FIELDS}
        sidecar.update({k: v for k, v in meta.items() if k != "checksums"})
        sidecar["provenance"] = list(meta["provenance"])
        sidecar["checksums"] = {k: blob_checksum(v) for k, v in sorted(blobs.items())}
        tmp_blob = blob_path.with_suffix(".npz.tmp")
        with open(tmp_blob, "wb") as fh:
            np.savez(fh, **blobs)
        os.replace(tmp_blob, blob_path)
        tmp_sidecar = sidecar_path.with_suffix(".json.tmp")
        tmp_sidecar.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        os.replace(tmp_sidecar, sidecar_path)

    def load(self, checkpoint_id: str) -> tuple[dict[str, np.ndarray], dict]:
        blob_path, sidecar_path = self._paths(checkpoint_id)
        if not blob_path.exists() or not sidecar_path.exists():
            raise CheckpointMissingError(
                checkpoint_id,
                f"checkpoint {checkpoint_id!r} not found in {self.root} "
                f"(expected {blob_path.name} + {sidecar_path.name}); run the "
                "upstream stage or register the checkpoint first")
        meta = json.loads(sidecar_path.read_text())
        with np.load(blob_path) as npz:
            blobs = {key: npz[key] for key in npz.files}
        recorded = meta.get("checksums", {})
        if set(recorded) != set(blobs):
            raise DataError(f"checkpoint {checkpoint_id!r}: sidecar keys do not "
                            "match stored blobs")
        for key, arr in blobs.items():
            if blob_checksum(arr) != recorded[key]:
                raise DataError(
                    f"checkpoint {checkpoint_id!r}: checksum mismatch on {key!r}")
        return blobs, meta

    @staticmethod
    def load_module(module: nn.Module, blobs: dict[str, np.ndarray],
                    prefix: str = "") -> None:
        """Copy prefixed blobs into a module, strictly."""
        state = {key[len(prefix):]: torch.from_numpy(np.ascontiguousarray(arr))
                 for key, arr in blobs.items() if key.startswith(prefix)}
        if not state:
            raise DataError(f"no blobs under prefix {prefix!r}")
        try:
            module.load_state_dict(state, strict=True)
        except RuntimeError as exc:
            raise ConfigError(f"blob layout does not match module: {exc}") from exc

    def save_bundle(self, checkpoint_id: str, bundle, meta: dict,
                    overwrite: bool = True) -> None:
        full = {"regime": bundle.regime, "provenance": bundle.provenance,
                "resolution": bundle.resolution, **meta}
        self.save(checkpoint_id, bundle_blobs(bundle), full, overwrite=overwrite)


def ensure_general_checkpoint(store: CheckpointStore, base_width: int,
                              seed: int = 0, source: str = "surrogate") -> str:
    """Materialize the general-domain backbone checkpoint if absent.

    ``surrogate`` registers a seeded fresh backbone as the general-domain
    stand-in (desk scale has no external corpus). ``imagenet`` imports real
    torchvision weights and requires base_width 64 plus the optional
    torchvision dependency.
    """
    ckpt_id = general_checkpoint_id(base_width)
    if store.exists(ckpt_id):
        return ckpt_id
    backbone = ResNetBackbone(base_width)
    if source == "surrogate":
        seeded_init_(backbone, derive_seed(seed, "general-corpus"))
    elif source == "imagenet":
        if base_width != 64:
            raise ConfigError("imagenet weights require base_width=64")
        try:
            from torchvision.models import ResNet50_Weights, resnet50
        except ImportError as exc:
            raise ConfigError(
                "imagenet source needs the optional torchvision dependency "
                "(pip install 'fundusfm[imagenet]')") from exc
        reference = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1)
        state = {k: v for k, v in reference.state_dict().items()
                 if not k.startswith("fc.")}
        backbone.load_state_dict(state, strict=True)
    else:
        raise ConfigError(f"unknown general-weight source {source!r}")
    store.save(ckpt_id, module_blobs(backbone, prefix="backbone."),
               {"regime": "general", "provenance": ["general_init"],
                "resolution": None, "rng_seed": seed,
                "config_hash": f"general:{source}:w{base_width}"})
    return ckpt_id
