"""Checkpoints: one flat little-endian float32 blob plus a JSON index."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch

from .model import CADModel, ModelConfig
from .synthgen import FormatVersionError

CHECKPOINT_VERSION = "1"


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".f32"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".f32")


def save_checkpoint(model: CADModel, path: str | Path, extra: dict | None = None) -> Path:
    index_path, blob_path = _paths(path)
    index_path.parent.mkdir(parents=True, exist_ok=True)
    groups = {name: g for g, items in model.parameter_groups().items() for name, _ in items}
    entries, chunks, offset = [], [], 0
    # state_dict also carries normalisation statistics, which live in buffers
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4").ravel()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "count": arr.size,
                        "group": groups.get(name, "buffer")})
        chunks.append(arr)
        offset += arr.size
    np.concatenate(chunks).tofile(blob_path)
    index = {
        "format_version": CHECKPOINT_VERSION,
        "blob": blob_path.name,
        "model_config": dataclasses.asdict(model.cfg),
        "parameters": entries,
        "extra": extra or {},
    }
    index_path.write_text(json.dumps(index, indent=1, sort_keys=True))
    return index_path


def read_index(path: str | Path) -> dict:
    index_path, _ = _paths(path)
    if not index_path.exists():
        raise FileNotFoundError(f"checkpoint index {index_path} not found")
    index = json.loads(index_path.read_text())
    if index.get("format_version") != CHECKPOINT_VERSION:
        raise FormatVersionError(f"unsupported checkpoint format_version {index.get('format_version')!r}")
    return index


def load_checkpoint(path: str | Path) -> tuple[CADModel, dict]:
    index_path, _ = _paths(path)
    index = read_index(index_path)
    blob = np.fromfile(index_path.parent / index["blob"], dtype="<f4")
    model = CADModel(ModelConfig(**index["model_config"]))
    state = model.state_dict()
    expected = set(state)
    found = {e["name"] for e in index["parameters"]}
    if expected != found:
        raise ValueError(f"checkpoint parameters do not match the model: "
                         f"missing {sorted(expected - found)[:3]}, extra {sorted(found - expected)[:3]}")
    with torch.no_grad():
        for e in index["parameters"]:
            values = blob[e["offset"]: e["offset"] + e["count"]].reshape(e["shape"])
            state[e["name"]].copy_(torch.from_numpy(values.copy()))
    model.eval()
    return model, index


def parameter_table(index: dict) -> dict[str, int]:
    counts = {"frozen": 0, "lora": 0, "trainable": 0}
    for e in index["parameters"]:
        if e["group"] in counts:
            counts[e["group"]] += e["count"]
    counts["total"] = sum(counts.values())
    return counts
