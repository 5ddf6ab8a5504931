"""Model archive: ``manifest.json`` plus one RMT1 file per parameter tensor."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import rmt
from .model import CompletionAutoencoder, NetworkSpec

FORMAT = "radiomap-model/1"


def _tensor_name(layer_index: int, name: str) -> str:
    return f"layer_{layer_index:03d}_{name}.rmt"


def save_model(root, model: CompletionAutoencoder, train_config=None, provenance=None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tensors = []
    for i, name, arr in model.parameters():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"layer {i} parameter {name} has non-finite entries")
        fname = _tensor_name(i, name)
        rmt.save(root / fname, arr)
        tensors.append({"layer": i, "name": name, "kind": model.layers[i].kind,
                        "shape": list(arr.shape), "file": fname})
    manifest = {
        "format": FORMAT,
        "network": model.spec.to_dict(),
        "dtype": model.dtype.name,
        "code_length": model.spec.code_length,
        "depth": model.spec.depth,
        "n_params": model.n_params(),
        "tensors": tensors,
        "train_config": train_config.to_dict() if hasattr(train_config, "to_dict") else train_config,
        "provenance": provenance or {},
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    rmt.atomic_write_bytes(root / "manifest.json", text.encode())
    return root


def read_model_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"model manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not a model archive (format {manifest.get('format')!r})")
    return manifest


def load_model(root, dtype=None) -> CompletionAutoencoder:
    root = Path(root)
    manifest = read_model_manifest(root)
    spec = NetworkSpec.from_dict(manifest["network"])
    model = CompletionAutoencoder(spec, seed=0, dtype=dtype or manifest.get("dtype", "float32"))
    arrays = [rmt.load(root / t["file"]) for t in manifest["tensors"]]
    model.set_weights(arrays)
    return model
