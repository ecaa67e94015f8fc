"""On-disk checkpoint format shared by the segmentation UNets and the DPG.

A checkpoint is a directory holding

* ``manifest.json``: kind, architecture config, fingerprints, metadata and
  the full list of tensor names/shapes, so a loader never needs reflection;
* ``weights.npz``: an uncompressed numpy archive with one little-endian
  float32 array per name (``encoder.block0.conv0.weight`` style).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .exceptions import ValidationError

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
WEIGHTS = "weights.npz"
WEIGHT_DTYPE = np.dtype("<f4")


def state_to_arrays(state_dict) -> Dict[str, np.ndarray]:
    return {
        name: np.ascontiguousarray(t.detach().cpu().numpy().astype(WEIGHT_DTYPE))
        for name, t in state_dict.items()
    }


def weights_fingerprint(weights: Dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name], dtype=WEIGHT_DTYPE)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


@dataclass
class ModelCheckpoint:
    """Named weight arrays plus everything needed to rebuild the network.

    ``kind`` is ``"unet"`` or ``"dpg"``. ``dpg_fingerprint`` links a
    segmentation model to the frozen encoder it was trained against.
    """

    kind: str
    config: dict
    weights: Dict[str, np.ndarray]
    dpg_fingerprint: Optional[str] = None
    metadata: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return weights_fingerprint(self.weights)

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(
            self.kind,
            copy.deepcopy(self.config),
            {k: v.copy() for k, v in self.weights.items()},
            self.dpg_fingerprint,
            copy.deepcopy(self.metadata),
        )

    def torch_state(self, dtype=torch.float32) -> Dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()).to(dtype) for k, v in self.weights.items()}

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "config": self.config,
            "fingerprint": self.fingerprint,
            "dpg_fingerprint": self.dpg_fingerprint,
            "metadata": self.metadata,
            "weights_file": WEIGHTS,
            "tensors": [
                {"name": k, "shape": list(v.shape), "dtype": WEIGHT_DTYPE.str}
                for k, v in sorted(self.weights.items())
            ],
        }
        np.savez(path / WEIGHTS, **{k: v.astype(WEIGHT_DTYPE) for k, v in self.weights.items()})
        (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        path = Path(path)
        mpath = path / MANIFEST
        if not mpath.is_file():
            raise ValidationError(f"no checkpoint manifest at {mpath}")
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"corrupt checkpoint manifest {mpath}: {exc}") from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported checkpoint format in {mpath}")
        wpath = path / manifest.get("weights_file", WEIGHTS)
        if not wpath.is_file():
            raise ValidationError(f"checkpoint weights missing: {wpath}")
        weights = {}
        with np.load(wpath, allow_pickle=False) as arrays:
            for entry in manifest["tensors"]:
                name = entry["name"]
                if name not in arrays:
                    raise ValidationError(f"tensor {name!r} listed in {mpath} is missing from {wpath}")
                arr = arrays[name]
                if list(arr.shape) != entry["shape"]:
                    raise ValidationError(f"tensor {name!r} has shape {arr.shape}, manifest says {entry['shape']}")
                weights[name] = arr.astype(WEIGHT_DTYPE)
        ckpt = cls(
            manifest["kind"],
            manifest["config"],
            weights,
            manifest.get("dpg_fingerprint"),
            manifest.get("metadata", {}),
        )
        if manifest.get("fingerprint") and manifest["fingerprint"] != ckpt.fingerprint:
            raise ValidationError(f"fingerprint mismatch for checkpoint {path}")
        return ckpt
