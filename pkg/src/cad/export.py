"""Visual exports: per-frame heatmaps as portable graymaps and embedding tables.

Every file carries a format version. PGM files hold it in a header comment,
the CSV in a leading ``#`` line, JSON files in a ``format_version`` field.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np
import torch

from .model import CADModel
from .synthgen import FormatVersionError, MediaClip
from .training import ClipArrays

EXPORT_VERSION = "1"


# ---------------------------------------------------------------------------
# portable graymap


def to_uint8(values: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Scale non-negative values so that ``vmax`` (default: the max) maps to 255."""
    v = np.asarray(values, dtype=np.float64)
    top = float(v.max()) if vmax is None else float(vmax)
    if top <= 0 or not np.isfinite(top):
        return np.zeros(v.shape, dtype=np.uint8)
    return np.clip(np.rint(v / top * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, image: np.ndarray) -> Path:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"expected a 2-d uint8 image, got {img.dtype} {img.shape}")
    h, w = img.shape
    header = f"P5\n# format_version {EXPORT_VERSION}\n{w} {h}\n255\n".encode("ascii")
    p = Path(path)
    p.write_bytes(header + img.tobytes())
    return p


_PGM_HEADER = re.compile(rb"P5\s+((?:#[^\n]*\n\s*)*)(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if not m:
        raise ValueError(f"{path}: not a binary PGM file")
    comments = m.group(1).decode("ascii", "replace")
    version = re.search(r"format_version\s+(\S+)", comments)
    if version is None or version.group(1) != EXPORT_VERSION:
        raise FormatVersionError(f"{path}: unsupported heatmap format_version "
                                 f"{version.group(1) if version else None!r}")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit graymaps are supported")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end())
    return pixels.reshape(h, w)


# ---------------------------------------------------------------------------
# attention heatmaps


def _clip_tensors(clip: MediaClip) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.from_numpy(clip.frames)[None], torch.from_numpy(clip.waveform)[None]


def attention_maps(model: CADModel, clip: MediaClip) -> dict:
    """Raw maps behind the heatmaps, all as float64 numpy arrays.

    ``specific``: activation energy of the modality-specific video encoder,
    (T, h, w). ``shared``: input-gradient magnitude of the logit through the
    shared video encoder only, with frame ``t`` scaled by the attention mass
    the audio queries place on it, (T, H, W). Also the two T x T cross-attention
    matrices.
    """
    model.eval()
    frames, wave = _clip_tensors(clip)
    with torch.no_grad():
        specific = model.encoders.specific_video.activation_energy(frames)[0]
        out = model(frames, wave)
    # gradient reaches the frames only through the shared video encoder
    shared_in = frames.clone().requires_grad_(True)
    with torch.enable_grad():
        video = model.encoders.shared_video(shared_in)
        stem = model.encoders.shared_audio.stem(wave)
        logit = model(frames, wave, shared=(video, stem)).logit.sum()
        (grad,) = torch.autograd.grad(logit, shared_in)
    saliency = grad[0].abs().sum(dim=-1)  # T, H, W
    w_a2v = out.shared.attention_a2v[0]
    T = frames.shape[1]
    # video_only has no audio queries; every frame then gets the uniform mass
    mass = w_a2v.mean(dim=0) if w_a2v.abs().sum() > 0 else torch.full((T,), 1.0 / T)
    shared = saliency * mass[:, None, None] * T
    return {
        "specific": specific.double().numpy(),
        "shared": shared.detach().double().numpy(),
        "attention_v2a": out.shared.attention_v2a[0].double().numpy(),
        "attention_a2v": w_a2v.double().numpy(),
        "frame_mass": mass.double().numpy(),
    }


def export_attention(model: CADModel, clip: MediaClip, out_dir: str | Path) -> dict:
    """Write T heatmaps per path plus ``<clip>.attention.json``; returns the file lists."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    maps = attention_maps(model, clip)
    written: dict[str, list[str]] = {"specific": [], "shared": []}
    for path in ("specific", "shared"):
        stack = maps[path]
        img = to_uint8(stack)  # one scale per path so frames are comparable
        for t in range(stack.shape[0]):
            p = write_pgm(out / f"{clip.clip_id}.{path}.{t:02d}.pgm", img[t])
            written[path].append(p.name)
    raw = {
        "format_version": EXPORT_VERSION,
        "clip_id": clip.clip_id,
        "category": clip.label.category.value,
        "files": written,
        "attention_v2a": maps["attention_v2a"].tolist(),
        "attention_a2v": maps["attention_a2v"].tolist(),
        "frame_mass": maps["frame_mass"].tolist(),
        "specific_energy": maps["specific"].tolist(),
        "shared_saliency": maps["shared"].tolist(),
    }
    json_path = out / f"{clip.clip_id}.attention.json"
    json_path.write_text(json.dumps(raw))
    written["json"] = [json_path.name]
    return written


def read_attention_json(path: str | Path) -> dict:
    raw = json.loads(Path(path).read_text())
    if raw.get("format_version") != EXPORT_VERSION:
        raise FormatVersionError(f"{path}: unsupported attention format_version {raw.get('format_version')!r}")
    return raw


def row_tv_from_uniform(weights: np.ndarray) -> float:
    """Mean total-variation distance of attention rows from the uniform row."""
    w = np.asarray(weights, dtype=np.float64)
    return float((0.5 * np.abs(w - 1.0 / w.shape[-1]).sum(axis=-1)).mean())


# ---------------------------------------------------------------------------
# embeddings


def embeddings(model: CADModel, data: ClipArrays, batch_size: int = 64) -> np.ndarray:
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            sl = slice(start, start + batch_size)
            chunks.append(model(data.frames[sl], data.waves[sl]).embedding)
    return torch.cat(chunks).double().numpy()


def export_embeddings(model: CADModel, data: ClipArrays, path: str | Path) -> Path:
    emb = embeddings(model, data)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as fh:
        fh.write(f"# format_version={EXPORT_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "category"] + [f"e{i}" for i in range(emb.shape[1])])
        for cid, cat, row in zip(data.ids, data.categories, emb):
            writer.writerow([cid, cat.value] + [repr(float(x)) for x in row])
    return p


def read_embeddings(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    with Path(path).open(newline="") as fh:
        first = fh.readline().strip()
        if first != f"# format_version={EXPORT_VERSION}":
            raise FormatVersionError(f"{path}: unsupported embeddings header {first!r}")
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["clip_id", "category"]:
            raise ValueError(f"{path}: unexpected columns {header[:2]}")
        ids, cats, rows = [], [], []
        for r in reader:
            ids.append(r[0])
            cats.append(r[1])
            rows.append([float(x) for x in r[2:]])
    return ids, cats, np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header) - 2)


def cluster_separation(emb: np.ndarray, cats: list[str]) -> tuple[float, float]:
    """(mean inter-category, mean intra-category) Euclidean distance."""
    x = np.asarray(emb, dtype=np.float64)
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))
    c = np.asarray(cats)
    same = c[:, None] == c[None, :]
    off = ~np.eye(len(c), dtype=bool)
    return float(d[~same].mean()), float(d[same & off].mean())
