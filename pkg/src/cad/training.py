"""Splits, the training loop and report generation."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import metrics
from .model import CADModel, LossBundle, ModelConfig, build_model
from .synthgen import Category, DatasetManifest, ForgeryLabel, MediaClip, load_clip

log = logging.getLogger(__name__)

REPORT_VERSION = "1"


class Protocol(str, enum.Enum):
    INTRA_70_30 = "INTRA_70_30"
    LEAVE_ONE_CATEGORY_OUT = "LEAVE_ONE_CATEGORY_OUT"

    @classmethod
    def parse(cls, name: str) -> "Protocol":
        aliases = {"intra": cls.INTRA_70_30, "loco": cls.LEAVE_ONE_CATEGORY_OUT}
        key = name.strip()
        if key.lower() in aliases:
            return aliases[key.lower()]
        try:
            return cls(key.upper())
        except ValueError:
            raise ValueError(f"unknown protocol {name!r}; use intra or loco") from None


def binary_label(clip: MediaClip | ForgeryLabel) -> bool:
    """Fake iff either modality, or both, was manipulated."""
    label = clip.label if isinstance(clip, MediaClip) else clip
    return label.category is not Category.REAL


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    protocol: Protocol
    train_ids: list[str]
    test_ids: list[str]
    held_out_category: Category | None = None
    seed: int = 0

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ValueError(f"train and test share {len(overlap)} clips, e.g. {sorted(overlap)[0]}")

    def to_json(self) -> dict:
        return {"protocol": self.protocol.value, "train_ids": self.train_ids, "test_ids": self.test_ids,
                "held_out_category": self.held_out_category.value if self.held_out_category else None,
                "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "SplitPlan":
        held = d.get("held_out_category")
        return cls(Protocol(d["protocol"]), list(d["train_ids"]), list(d["test_ids"]),
                   Category(held) if held else None, int(d.get("seed", 0)))


def _apportion(counts: dict, fraction: float) -> dict:
    """Per-group train counts whose sum is round(fraction * total), largest remainder."""
    total = round(fraction * sum(counts.values()))
    quotas = {k: fraction * n for k, n in counts.items()}
    alloc = {k: math.floor(q) for k, q in quotas.items()}
    order = sorted(counts, key=lambda k: (-(quotas[k] - alloc[k]), list(counts).index(k)))
    for k in order[: total - sum(alloc.values())]:
        alloc[k] += 1
    return alloc


def make_split(manifest: DatasetManifest, protocol: Protocol | str, seed: int = 0,
               held_out: Category | str | None = None, train_fraction: float = 0.7) -> SplitPlan:
    if not manifest.entries:
        raise ValueError("manifest is empty")
    protocol = Protocol.parse(protocol) if isinstance(protocol, str) else protocol
    if isinstance(held_out, str):
        held_out = Category.parse(held_out)
    rng = np.random.default_rng(seed)
    groups: dict[Category, list[str]] = {}
    for e in manifest.entries:
        groups.setdefault(e.label.category, []).append(e.clip_id)
    for ids in groups.values():
        ids.sort()
        rng.shuffle(ids)

    if protocol is Protocol.INTRA_70_30:
        if held_out is not None:
            raise ValueError("held_out only applies to leave-one-category-out")
        alloc = _apportion({c: len(v) for c, v in groups.items()}, train_fraction)
        train = [i for c, ids in groups.items() for i in ids[: alloc[c]]]
        test = [i for c, ids in groups.items() for i in ids[alloc[c]:]]
        return SplitPlan(protocol, sorted(train), sorted(test), None, seed)

    if held_out is None:
        raise ValueError("leave-one-category-out needs a held-out category")
    if held_out is Category.REAL:
        raise ValueError("the held-out category must be a fake category")
    if held_out not in groups:
        raise ValueError(f"held-out category {held_out.value} is absent from the manifest")
    reals = groups.get(Category.REAL, [])
    n_real_train = _apportion({"real": len(reals)}, train_fraction)["real"]
    train = reals[:n_real_train] + [i for c, ids in groups.items()
                                    if c not in (Category.REAL, held_out) for i in ids]
    test = reals[n_real_train:] + groups[held_out]
    return SplitPlan(protocol, sorted(train), sorted(test), held_out, seed)


# ---------------------------------------------------------------------------
# data


@dataclass
class ClipArrays:
    ids: list[str]
    frames: torch.Tensor
    waves: torch.Tensor
    labels: torch.Tensor
    categories: list[Category]

    def __len__(self):
        return len(self.ids)

    def subset(self, ids: list[str]) -> "ClipArrays":
        pos = {c: i for i, c in enumerate(self.ids)}
        try:
            idx = [pos[i] for i in ids]
        except KeyError as exc:
            raise KeyError(f"clip {exc.args[0]!r} not loaded") from None
        t = torch.as_tensor(idx, dtype=torch.long)
        return ClipArrays([self.ids[i] for i in idx], self.frames[t], self.waves[t], self.labels[t],
                          [self.categories[i] for i in idx])


def load_arrays(manifest: DatasetManifest, ids: list[str] | None = None) -> ClipArrays:
    entries = manifest.by_id()
    ids = list(ids) if ids is not None else [e.clip_id for e in manifest.entries]
    clips = [load_clip(manifest, entries[i]) for i in ids]
    return ClipArrays(
        ids,
        torch.from_numpy(np.stack([c.frames for c in clips])),
        torch.from_numpy(np.stack([c.waveform for c in clips])),
        torch.tensor([float(binary_label(c)) for c in clips]),
        [c.label.category for c in clips],
    )


def from_clips(clips: list[MediaClip]) -> ClipArrays:
    return ClipArrays(
        [c.clip_id for c in clips],
        torch.from_numpy(np.stack([c.frames for c in clips])),
        torch.from_numpy(np.stack([c.waveform for c in clips])),
        torch.tensor([float(binary_label(c)) for c in clips]),
        [c.label.category for c in clips],
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    # rotate each training clip by a random whole number of frames, video and
    # audio together; generated clips are periodic, so labels are unchanged
    roll_augment: bool = False
    # mirror each training clip left to right with probability 1/2
    flip_augment: bool = True
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam", "adamw"):
            raise ValueError(f"optimizer must be 'sgd', 'adam' or 'adamw', got {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, state: dict, curve: list):
        super().__init__(f"total loss became non-finite in epoch {epoch}; restored last finite state")
        self.epoch, self.state, self.curve = epoch, state, curve


@dataclass
class TrainResult:
    model: CADModel
    curve: list[dict]
    seconds: float


def _mean_bundle(bundles: list[LossBundle], weights: list[int]) -> dict:
    n = sum(weights)
    out = {}
    for key in ("l_cls", "l_kl", "l_kd", "total"):
        out[key] = sum(getattr(b, key) * w for b, w in zip(bundles, weights)) / n
    out["lambda_kl"], out["lambda_kd"] = bundles[0].lambda_kl, bundles[0].lambda_kd
    return out


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def precompute_shared(model: CADModel, data: ClipArrays, chunk: int = 64):
    """Frozen-path features for every clip, or None when the shared path trains."""
    if not model.shared_frozen:
        return None
    vids, stems = [], []
    with torch.no_grad():
        for sl in _batches(len(data), chunk):
            v, s = model.shared_features(data.frames[sl], data.waves[sl])
            vids.append(v)
            stems.append(s)
    return torch.cat(vids), torch.cat(stems)


def dataset_loss(model: CADModel, data: ClipArrays, shared=None, batch_size: int = 64) -> dict:
    """Loss over ``data`` in eval mode, so normalisation statistics stay untouched."""
    was_training = model.training
    model.eval()
    bundles, weights = [], []
    with torch.no_grad():
        for sl in _batches(len(data), batch_size):
            sh = None if shared is None else (shared[0][sl], shared[1][sl])
            out = model(data.frames[sl], data.waves[sl], sh)
            _, b = model.loss(out, data.labels[sl])
            bundles.append(b)
            weights.append(sl.stop - sl.start)
    model.train(was_training)
    return _mean_bundle(bundles, weights)


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def roll_frames(x: torch.Tensor, shifts: torch.Tensor) -> torch.Tensor:
    """Rotate dim 1 of ``x`` by a per-sample number of steps."""
    T = x.shape[1]
    idx = (torch.arange(T)[None, :] - shifts[:, None]) % T
    idx = idx.reshape(idx.shape + (1,) * (x.ndim - 2)).expand_as(x)
    return torch.gather(x, 1, idx)


def _rolled_batch(frames, waves, shared, shifts):
    B, T = frames.shape[:2]
    frames = roll_frames(frames, shifts)
    waves = roll_frames(waves.reshape(B, T, -1), shifts).reshape(B, -1)
    if shared is not None:
        shared = (roll_frames(shared[0], shifts), roll_frames(shared[1], shifts))
    return frames, waves, shared


def train(model: CADModel, data: ClipArrays, cfg: TrainConfig) -> TrainResult:
    """Minibatch training on ``data``; ``curve[0]`` is the loss before any step."""
    if len(data) == 0:
        raise ValueError("training set is empty")
    torch.set_num_threads(cfg.threads)
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    shared = precompute_shared(model, data)
    mirrored = None
    if cfg.flip_augment and shared is not None:
        mirror = ClipArrays(data.ids, data.frames.flip(3), data.waves, data.labels, data.categories)
        mirrored = precompute_shared(model, mirror)[0]
    opt = _make_optimizer(model.trainable_parameters(), cfg)
    curve = [dataset_loss(model, data, shared)]
    for epoch in range(1, cfg.epochs + 1):
        snapshot = {k: v.detach().clone() for k, v in model.state_dict().items()}
        model.train()
        order = torch.as_tensor(rng.permutation(len(data)))
        for sl in _batches(len(data), cfg.batch_size):
            idx = order[sl]
            sh = None if shared is None else (shared[0][idx], shared[1][idx])
            frames, waves = data.frames[idx], data.waves[idx]
            if cfg.flip_augment:
                flip = torch.as_tensor(rng.random(len(idx)) < 0.5)
                frames = torch.where(flip[:, None, None, None, None], frames.flip(3), frames)
                if sh is not None:
                    sh = (torch.where(flip[:, None, None], mirrored[idx], sh[0]), sh[1])
            if cfg.roll_augment:
                shifts = torch.as_tensor(rng.integers(0, frames.shape[1], len(idx)))
                frames, waves, sh = _rolled_batch(frames, waves, sh, shifts)
            out = model(frames, waves, sh)
            total, _ = model.loss(out, data.labels[idx])
            if not torch.isfinite(total):
                model.load_state_dict(snapshot)
                raise TrainingDiverged(epoch, snapshot, curve)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
        model.eval()
        curve.append(dataset_loss(model, data, shared))
        log.info("epoch %d: %s", epoch, curve[-1])
    return TrainResult(model, curve, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# evaluation


def score(model: CADModel, data: ClipArrays, batch_size: int = 64) -> np.ndarray:
    """Fused logits for every clip."""
    model.eval()
    logits = []
    with torch.no_grad():
        for sl in _batches(len(data), batch_size):
            logits.append(model(data.frames[sl], data.waves[sl]).logit)
    return torch.cat(logits).double().numpy() if logits else np.zeros(0)


def _row(logits: np.ndarray, labels: np.ndarray) -> dict:
    row = {"n": int(len(labels))}
    probs = 1.0 / (1.0 + np.exp(-logits))
    row["acc"] = metrics.accuracy(probs, labels)
    for name, fn in (("auc", metrics.auc), ("ap", metrics.average_precision)):
        try:
            row[name] = fn(logits, labels)
        except metrics.UndefinedMetricError as exc:
            row[name] = None
            row.setdefault("error", str(exc))
    return row


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EvalReport:
    protocol: str
    rows: dict[str, dict]
    n_train: int
    n_test: int
    config: dict
    config_fingerprint: str
    wall_clock_seconds: float
    held_out_category: str | None = None
    format_version: str = REPORT_VERSION

    def average(self, key: str = "auc") -> float | None:
        vals = [r[key] for name, r in self.rows.items()
                if name not in ("ALL", "MEAN") and r.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    def to_json(self) -> dict:
        return asdict(self)

    def reproducible_view(self) -> dict:
        """Everything except timing, which legitimately varies between runs."""
        d = self.to_json()
        d.pop("wall_clock_seconds")
        return d

    def to_text(self) -> str:
        lines = [f"protocol: {self.protocol}" + (f" (held out: {self.held_out_category})"
                                                 if self.held_out_category else ""),
                 f"n_train={self.n_train} n_test={self.n_test} config={self.config_fingerprint}",
                 f"{'subset':<16}{'n':>6}{'Acc':>9}{'AUC':>9}{'AP':>9}"]
        fmt = lambda v: f"{v:9.2f}" if v is not None else f"{'N/A':>9}"  # noqa: E731
        for name, r in self.rows.items():
            lines.append(f"{name:<16}{r.get('n', 0):>6}{fmt(r.get('acc'))}{fmt(r.get('auc'))}{fmt(r.get('ap'))}")
        return "\n".join(lines)


def evaluate(model: CADModel, data: ClipArrays, split: SplitPlan, config: dict | None = None) -> EvalReport:
    """Per-category rows (each fake category against the test reals), a row for
    the whole test set and the mean of the category rows."""
    start = time.perf_counter()
    test = data.subset(split.test_ids)
    logits = score(model, test)
    labels = test.labels.numpy().astype(bool)
    cats = np.array([c.value for c in test.categories])
    rows = {}
    real = cats == Category.REAL.value
    for c in Category:
        if c is Category.REAL or not (cats == c.value).any():
            continue
        mask = real | (cats == c.value)
        rows[c.value] = _row(logits[mask], labels[mask])
    rows["ALL"] = _row(logits, labels)
    cat_rows = [r for k, r in rows.items() if k != "ALL"]
    mean = {"n": int(len(labels))}
    for key in ("acc", "auc", "ap"):
        vals = [r[key] for r in cat_rows if r.get(key) is not None]
        mean[key] = float(np.mean(vals)) if vals else None
    rows["MEAN"] = mean
    config = config or {}
    return EvalReport(split.protocol.value, rows, len(split.train_ids), len(split.test_ids), config,
                      config_fingerprint(config), time.perf_counter() - start,
                      split.held_out_category.value if split.held_out_category else None)


def run_protocol(model_cfg: ModelConfig, train_cfg: TrainConfig, data: ClipArrays, split: SplitPlan,
                 config: dict | None = None) -> tuple[TrainResult, EvalReport]:
    model = build_model(model_cfg, train_cfg.seed)
    result = train(model, data.subset(split.train_ids), train_cfg)
    return result, evaluate(result.model, data, split, config)


def ablation_sweep(model_cfg: ModelConfig, train_cfg: TrainConfig, data: ClipArrays, split: SplitPlan,
                   variants: list[str], config: dict | None = None) -> dict[str, dict]:
    """Full model plus one run per single-flag variant on the same split and seed.

    A run that raises is recorded as FAILED and the sweep carries on.
    """
    rows: dict[str, dict] = {}
    for name in ["full", *variants]:
        flags = [] if name == "full" else [name]
        try:
            cfg = ModelConfig(**{**asdict(model_cfg), "flags": sorted(set(model_cfg.flags) | set(flags))})
            _, report = run_protocol(cfg, train_cfg, data, split, config)
            rows[name] = {"status": "OK", "flags": cfg.flags, "report": report.to_json(),
                          "mean_auc": report.rows["MEAN"]["auc"], "mean_ap": report.rows["MEAN"]["ap"]}
        except Exception as exc:  # noqa: BLE001 - any failure becomes a FAILED row
            log.warning("ablation %s failed: %s", name, exc)
            rows[name] = {"status": "FAILED", "flags": flags, "error": f"{type(exc).__name__}: {exc}"}
    full = rows["full"]
    for name, row in rows.items():
        ok = row["status"] == "OK" and full["status"] == "OK"
        for key in ("auc", "ap"):
            row[f"delta_{key}"] = (row[f"mean_{key}"] - full[f"mean_{key}"]
                                   if ok and row[f"mean_{key}"] is not None else None)
    return rows


def ablation_table(rows: dict[str, dict]) -> str:
    cats = [c.value for c in Category if c is not Category.REAL]
    lines = [f"{'variant':<20}{'AUC':>8}{'dAUC':>8}{'AP':>8}{'dAP':>8}  " + " ".join(f"{c[:10]:>10}" for c in cats)]
    for name, r in rows.items():
        if r["status"] != "OK":
            lines.append(f"{name:<20}{'FAILED':>8}  {r['error']}")
            continue
        per = r["report"]["rows"]
        cells = " ".join(f"{per[c]['auc']:10.2f}" if c in per and per[c]["auc"] is not None
                         else f"{'N/A':>10}" for c in cats)
        lines.append(f"{name:<20}{r['mean_auc']:8.2f}{r['delta_auc']:8.2f}{r['mean_ap']:8.2f}"
                     f"{r['delta_ap']:8.2f}  {cells}")
    return "\n".join(lines)
