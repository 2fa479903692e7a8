"""Procedural audio-visual clips with planted forgery artifacts.

A real clip is a drifting cartoon face whose mouth opening follows the
loudness envelope of a harmonic voice-like waveform. Fakes are made by
stacking three kinds of edits on top of a real clip:

* a blending seam in the frames (visual-only trace),
* a spectral spike plus amplitude quantization in the audio (audio-only trace),
* a circular shift of the audio against the frames (lip-sync break that is
  invisible to either stream alone).

Everything is a pure function of the clip seed, so datasets rebuild
bit-for-bit.
"""

from __future__ import annotations

import copy
import enum
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = "1"


class FormatVersionError(ValueError):
    """A file declares a format_version this reader does not understand."""


MOUTH_RGB = (0.55, 0.08, 0.12)
EYE_RGB = (0.10, 0.10, 0.12)


class Category(str, enum.Enum):
    REAL = "REAL"
    VISUAL_ONLY = "VISUAL_ONLY"
    AUDIO_ONLY = "AUDIO_ONLY"
    BOTH_SPECIFIC = "BOTH_SPECIFIC"
    MISALIGNED = "MISALIGNED"
    COMBINED = "COMBINED"

    @classmethod
    def parse(cls, name: str) -> "Category":
        try:
            return cls(name.strip().upper().replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown category {name!r}; expected one of "
                             f"{[c.value for c in cls]}") from None


FAKE_CATEGORIES = [c for c in Category if c is not Category.REAL]
SPECIFIC_CATEGORIES = [Category.VISUAL_ONLY, Category.AUDIO_ONLY, Category.BOTH_SPECIFIC]


def _category_for(applied: set[str]) -> Category:
    if not applied:
        return Category.REAL
    specific = applied & {"visual", "audio"}
    if "misalignment" in applied:
        return Category.COMBINED if specific else Category.MISALIGNED
    if specific == {"visual", "audio"}:
        return Category.BOTH_SPECIFIC
    return Category.VISUAL_ONLY if "visual" in specific else Category.AUDIO_ONLY


@dataclass(frozen=True)
class ForgeryLabel:
    category: Category
    is_fake: bool
    artifact_params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.is_fake != (self.category is not Category.REAL):
            raise ValueError(f"is_fake={self.is_fake} inconsistent with {self.category.value}")
        if self.category in (Category.MISALIGNED, Category.COMBINED):
            off = self.artifact_params.get("misalignment", {}).get("offset_frames", 0)
            if off == 0:
                raise ValueError("misaligned label requires a nonzero offset_frames")

    @classmethod
    def real(cls) -> "ForgeryLabel":
        return cls(Category.REAL, False, {})

    def to_json(self) -> dict:
        return {"category": self.category.value, "is_fake": self.is_fake,
                "artifact_params": self.artifact_params}

    @classmethod
    def from_json(cls, d: dict) -> "ForgeryLabel":
        return cls(Category(d["category"]), bool(d["is_fake"]), d.get("artifact_params", {}))


@dataclass(frozen=True)
class MediaClip:
    frames: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    waveform: np.ndarray  # (L,) float32 in [-1, 1]
    label: ForgeryLabel
    clip_id: str
    seed: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class GenConfig:
    seed: int = 0
    # explicit per-category counts; when empty, n_clips is split evenly
    counts: dict[str, int] = field(default_factory=dict)
    n_clips: int = 400
    n_frames: int = 16
    height: int = 32
    width: int = 32
    sample_rate: int = 8000
    n_samples: int = 8000
    visual_strength: tuple[float, float] = (0.35, 0.6)
    audio_strength: tuple[float, float] = (0.15, 0.6)
    offset_range: tuple[int, int] = (2, 8)
    spike_hz: float = 3100.0

    def __post_init__(self):
        self.visual_strength = tuple(float(x) for x in self.visual_strength)
        self.audio_strength = tuple(float(x) for x in self.audio_strength)
        self.offset_range = tuple(int(x) for x in self.offset_range)
        self.counts = {Category.parse(k).value: int(v) for k, v in dict(self.counts).items()}
        if self.n_samples % self.n_frames:
            raise ValueError("n_samples must split into n_frames equal audio segments")

    def category_counts(self) -> dict[Category, int]:
        if self.counts:
            return {Category(k): v for k, v in self.counts.items()}
        base, extra = divmod(self.n_clips, len(Category))
        return {c: base + (i < extra) for i, c in enumerate(Category)}

    def to_json(self) -> dict:
        d = asdict(self)
        d["visual_strength"] = list(self.visual_strength)
        d["audio_strength"] = list(self.audio_strength)
        d["offset_range"] = list(self.offset_range)
        return d


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *tags]))


def derive_seed(base: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(base), *tags]).generate_state(1, dtype=np.uint64)[0])


# tags that keep per-purpose random streams independent of one another
_SCENE, _VISUAL, _AUDIO, _PLAN = 1, 2, 3, 4


# ---------------------------------------------------------------------------
# real clips


ENVELOPE_MAX_AUTOCORR = 0.35


def _circular_autocorr(x: np.ndarray, lag: int) -> float:
    return float(np.corrcoef(x, np.roll(x, lag))[0, 1])


def _envelope(rng: np.random.Generator, T: int) -> np.ndarray:
    """Syllable-like loudness in [0.1, 1], one value per frame.

    Draws whose circular autocorrelation at any lag from 2 to T/2 reaches
    ENVELOPE_MAX_AUTOCORR are redrawn, so every misalignment offset the
    generator uses really breaks lip sync.
    """
    lags = range(2, T // 2 + 1)
    for _ in range(1000):
        raw = rng.uniform(0.0, 1.0, T)
        smooth = 0.7 * raw + 0.15 * np.roll(raw, 1) + 0.15 * np.roll(raw, -1)
        if T < 4 or all(_circular_autocorr(smooth, k) < ENVELOPE_MAX_AUTOCORR for k in lags):
            break
    lo, hi = smooth.min(), smooth.max()
    return 0.1 + 0.9 * (smooth - lo) / max(hi - lo, 1e-9)


def _ellipse_alpha(xx, yy, cx, cy, rx, ry):
    d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    return np.clip((1.0 - d) * min(rx, ry) + 0.5, 0.0, 1.0)[..., None]


def generate_real(seed: int, cfg: GenConfig | None = None, clip_id: str | None = None) -> MediaClip:
    """Render a lip-synced clip; mouth aperture tracks the audio envelope."""
    cfg = cfg or GenConfig()
    T, H, W = cfg.n_frames, cfg.height, cfg.width
    rng = _rng(seed, _SCENE)
    env = _envelope(rng, T)

    # frames
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    c0 = np.array([rng.uniform(0, 0.3), rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9)])
    c1 = np.array([rng.uniform(0, 0.3), rng.uniform(0.3, 0.9), rng.uniform(0.3, 0.9)])
    ramp = (xx / max(W - 1, 1))[..., None]
    background = (1 - ramp) * c0 + ramp * c1 + rng.normal(0, 0.02, (H, W, 1))
    skin = np.array([rng.uniform(0.75, 0.95), rng.uniform(0.55, 0.7), rng.uniform(0.45, 0.6)])
    scale = H / 32.0
    rx, ry = 9.0 * scale, 11.0 * scale
    phase = rng.uniform(0, 2 * np.pi, 2)
    amp = rng.uniform(0.25, 1.0, 2) * scale
    frames = np.empty((T, H, W, 3))
    for t in range(T):
        cx = W / 2 + amp[0] * np.sin(2 * np.pi * t / T + phase[0])
        cy = H / 2 + amp[1] * np.sin(2 * np.pi * t / T + phase[1])
        img = background.copy()
        a = _ellipse_alpha(xx, yy, cx, cy, rx, ry)
        img = (1 - a) * img + a * skin
        for sx in (-3.5, 3.5):
            a = _ellipse_alpha(xx, yy, cx + sx * scale, cy - 3 * scale, 1.3 * scale, 1.3 * scale)
            img = (1 - a) * img + a * np.array(EYE_RGB)
        mouth_ry = (0.5 + 3.5 * env[t]) * scale
        a = _ellipse_alpha(xx, yy, cx, cy + 5 * scale, 4.5 * scale, mouth_ry)
        img = (1 - a) * img + a * np.array(MOUTH_RGB)
        frames[t] = img + rng.normal(0, 0.01, img.shape)
    frames = np.clip(frames, 0.0, 1.0)

    # audio
    L, sr = cfg.n_samples, cfg.sample_rate
    ts = np.arange(L) / sr
    f0 = rng.uniform(110, 220)
    carrier = np.zeros(L)
    for k in range(1, 9):
        carrier += np.sin(2 * np.pi * k * f0 * ts + rng.uniform(0, 2 * np.pi)) / k
    seg = L // T
    centers = (np.arange(T) + 0.5) * seg
    env_samples = np.interp(np.arange(L), centers, env, period=L)
    voiced = env_samples * carrier
    wave = 0.85 * voiced / np.abs(voiced).max() + rng.normal(0, 0.005, L)
    wave = np.clip(wave, -1.0, 1.0)

    return MediaClip(frames=frames.astype(np.float32), waveform=wave.astype(np.float32),
                     label=ForgeryLabel.real(), clip_id=clip_id or f"clip-{seed}", seed=int(seed))


# ---------------------------------------------------------------------------
# artifact injection


def _check_strength(strength: float):
    if not 0.0 < strength <= 1.0:
        raise ValueError(f"strength must lie in (0, 1], got {strength}")


def _relabel(clip: MediaClip, kind: str, params: dict) -> ForgeryLabel:
    merged = copy.deepcopy(clip.label.artifact_params)
    merged[kind] = params
    cat = _category_for(set(merged))
    return ForgeryLabel(cat, True, merged)


def inject_visual_artifact(clip: MediaClip, strength: float) -> MediaClip:
    """Paste a face-swap style seam: a colour-shifted box with a noisy border."""
    _check_strength(strength)
    T, H, W, _ = clip.frames.shape
    rng = _rng(clip.seed, _VISUAL)
    scale = H / 32.0
    bw, bh = (int(round(rng.uniform(14, 18) * scale)) for _ in range(2))
    x0 = int(rng.integers(W // 2 - bw // 2 - 2, W // 2 - bw // 2 + 3))
    y0 = int(rng.integers(H // 2 - bh // 2 - 2, H // 2 - bh // 2 + 3))
    shift = rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0, 3)
    noise = rng.normal(0.0, 1.0, (T, bh, bw, 3))

    ring = np.zeros((bh, bw, 1))
    ring[:2], ring[-2:], ring[:, :2], ring[:, -2:] = 1.0, 1.0, 1.0, 1.0

    out = clip.frames.astype(np.float64)
    patch = out[:, y0:y0 + bh, x0:x0 + bw]
    patch += 0.12 * strength * shift + 0.25 * strength * noise * ring
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    params = {"strength": float(strength), "box": [x0, y0, bw, bh]}
    return replace(clip, frames=out, label=_relabel(clip, "visual", params))


def inject_audio_artifact(clip: MediaClip, strength: float, spike_hz: float = 3100.0,
                          sample_rate: int = 8000) -> MediaClip:
    """Add a steady tone at ``spike_hz`` and requantize the samples."""
    _check_strength(strength)
    rng = _rng(clip.seed, _AUDIO)
    L = clip.waveform.shape[0]
    ts = np.arange(L) / sample_rate
    tone = 0.06 * strength * np.sin(2 * np.pi * spike_hz * ts + rng.uniform(0, 2 * np.pi))
    wave = clip.waveform.astype(np.float64) + tone
    bits = int(round(12 - 8 * strength))
    step = 2.0 / 2 ** bits
    wave = np.clip(np.round(wave / step) * step, -1.0, 1.0).astype(np.float32)
    params = {"strength": float(strength), "spike_hz": float(spike_hz), "bits": bits}
    return replace(clip, waveform=wave, label=_relabel(clip, "audio", params))


def inject_misalignment(clip: MediaClip, offset_frames: int) -> MediaClip:
    """Circularly delay the audio by whole frame-periods against the video."""
    T = clip.n_frames
    offset_frames = int(offset_frames)
    if not 1 <= abs(offset_frames) <= T // 2:
        raise ValueError(f"offset_frames must satisfy 1 <= |offset| <= {T // 2}, got {offset_frames}")
    seg = clip.waveform.shape[0] // T
    wave = np.roll(clip.waveform, offset_frames * seg)
    params = {"offset_frames": offset_frames}
    return replace(clip, waveform=wave, label=_relabel(clip, "misalignment", params))


# ---------------------------------------------------------------------------
# probes and single-modality detectors


def mouth_aperture_series(frames: np.ndarray) -> np.ndarray:
    """Per-frame area of mouth-coloured pixels."""
    f = np.asarray(frames, dtype=np.float64)
    r, g = f[..., 0], f[..., 1]
    w = np.clip((0.3 - g) / 0.2, 0, 1) * np.clip((r - g - 0.15) / 0.2, 0, 1)
    return w.sum(axis=(1, 2))


def audio_envelope(waveform: np.ndarray, n_frames: int) -> np.ndarray:
    """RMS of each of the ``n_frames`` equal audio segments."""
    segs = np.asarray(waveform, dtype=np.float64).reshape(n_frames, -1)
    return np.sqrt((segs ** 2).mean(axis=1))


def sync_correlation(clip: MediaClip, lag: int = 0) -> float:
    """Pearson correlation of mouth area against the audio envelope at ``lag``."""
    m = mouth_aperture_series(clip.frames)
    e = np.roll(audio_envelope(clip.waveform, clip.n_frames), -lag)
    return float(np.corrcoef(m, e)[0, 1])


def spectral_spike_score(waveform: np.ndarray, spike_hz: float = 3100.0, sample_rate: int = 8000) -> float:
    """Magnitude at ``spike_hz`` relative to the median of its neighbourhood."""
    mag = np.abs(np.fft.rfft(np.asarray(waveform, dtype=np.float64)))
    k = int(round(spike_hz * len(waveform) / sample_rate))
    lo, hi = max(k - 60, 0), min(k + 61, len(mag))
    neighbourhood = np.concatenate([mag[lo:k - 3], mag[k + 4:hi]])
    return float(mag[k - 1:k + 2].max() / (np.median(neighbourhood) + 1e-12))


def seam_energy_score(frames: np.ndarray) -> float:
    """Spread of flickering Nyquist-band energy across the frame.

    Frame differencing cancels static texture; a 2x2 checkerboard filter keeps
    pixel-scale noise and ignores smooth moving edges. A pasted seam flickers
    on a thin border, which lifts the upper tail of the per-pixel energy well
    above its median.
    """
    g = np.asarray(frames, dtype=np.float64).mean(axis=-1)
    d = np.diff(g, axis=0)
    c = d[:, :-1, :-1] - d[:, :-1, 1:] - d[:, 1:, :-1] + d[:, 1:, 1:]
    e = (c ** 2).mean(axis=0)
    return float(np.sqrt(np.percentile(e, 90) / (np.median(e) + 1e-18)))


SPIKE_THRESHOLD = 8.0
SEAM_THRESHOLD = 4.9


def flags_audio_artifact(clip: MediaClip, cfg: GenConfig | None = None) -> bool:
    cfg = cfg or GenConfig()
    return spectral_spike_score(clip.waveform, cfg.spike_hz, cfg.sample_rate) > SPIKE_THRESHOLD


def flags_visual_artifact(clip: MediaClip) -> bool:
    return seam_energy_score(clip.frames) > SEAM_THRESHOLD


# ---------------------------------------------------------------------------
# dataset assembly


def make_clip(category: Category, seed: int, cfg: GenConfig, clip_id: str) -> MediaClip:
    """Generate a real clip and apply the edits that define ``category``."""
    clip = generate_real(seed, cfg, clip_id)
    rng = _rng(seed, _PLAN)
    kinds = {
        Category.REAL: [],
        Category.VISUAL_ONLY: ["visual"],
        Category.AUDIO_ONLY: ["audio"],
        Category.BOTH_SPECIFIC: ["visual", "audio"],
        Category.MISALIGNED: ["misalignment"],
        Category.COMBINED: [["visual", "audio"][rng.integers(2)], "misalignment"],
    }[category]
    for kind in kinds:
        if kind == "visual":
            clip = inject_visual_artifact(clip, rng.uniform(*cfg.visual_strength))
        elif kind == "audio":
            clip = inject_audio_artifact(clip, rng.uniform(*cfg.audio_strength),
                                         cfg.spike_hz, cfg.sample_rate)
        else:
            lo, hi = cfg.offset_range
            hi = min(hi, cfg.n_frames // 2)
            off = int(rng.integers(lo, hi + 1)) * int(rng.choice([-1, 1]))
            clip = inject_misalignment(clip, off)
    return clip


@dataclass
class ManifestEntry:
    clip_id: str
    frames: str
    audio: str
    meta: str
    label: ForgeryLabel
    seed: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    generator_config: dict
    format_version: str = FORMAT_VERSION
    root: Path | None = None

    def __len__(self):
        return len(self.entries)

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.clip_id: e for e in self.entries}

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "generator_config": self.generator_config,
            "entries": [
                {"clip_id": e.clip_id, "frames": e.frames, "audio": e.audio, "meta": e.meta,
                 "seed": e.seed, "label": e.label.to_json()}
                for e in self.entries
            ],
        }


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_clip(clip: MediaClip, out_dir: Path) -> ManifestEntry:
    names = {k: f"{clip.clip_id}.{k}" for k in ("frames.f32", "audio.f32", "meta.json")}
    clip.frames.astype("<f4").tofile(out_dir / names["frames.f32"])
    clip.waveform.astype("<f4").tofile(out_dir / names["audio.f32"])
    _dump_json({
        "format_version": FORMAT_VERSION,
        "clip_id": clip.clip_id,
        "dtype": "float32-le",
        "frames_shape": list(clip.frames.shape),
        "audio_shape": list(clip.waveform.shape),
        "seed": clip.seed,
        "label": clip.label.to_json(),
    }, out_dir / names["meta.json"])
    return ManifestEntry(clip.clip_id, names["frames.f32"], names["audio.f32"],
                         names["meta.json"], clip.label, clip.seed)


def iter_plan(cfg: GenConfig):
    """Yield (category, clip_id, seed) for every clip the config asks for."""
    counts = cfg.category_counts()
    if sum(counts.values()) <= 0:
        raise ValueError("dataset config requests zero clips")
    for ci, cat in enumerate(Category):
        for i in range(counts.get(cat, 0)):
            yield cat, f"{cat.value.lower()}-{i:04d}", derive_seed(cfg.seed, ci, i)


def build_dataset(cfg: GenConfig, out_dir: str | os.PathLike) -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for cat, clip_id, seed in iter_plan(cfg):
        entries.append(write_clip(make_clip(cat, seed, cfg, clip_id), out))
    manifest = DatasetManifest(entries, cfg.to_json(), root=out)
    _dump_json(manifest.to_json(), out / "manifest.json")
    return manifest


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    data = json.loads(path.read_text())
    if data.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported manifest format_version {data.get('format_version')!r}")
    root = path.parent
    entries = []
    seen = set()
    for d in data["entries"]:
        if d["clip_id"] in seen:
            raise ValueError(f"duplicate clip_id {d['clip_id']!r} in manifest")
        seen.add(d["clip_id"])
        for key in ("frames", "audio", "meta"):
            if not (root / d[key]).exists():
                raise FileNotFoundError(f"{d['clip_id']}: missing {key} file {d[key]}")
        entries.append(ManifestEntry(d["clip_id"], d["frames"], d["audio"], d["meta"],
                                     ForgeryLabel.from_json(d["label"]), int(d["seed"])))
    return DatasetManifest(entries, data["generator_config"], data["format_version"], root)


def load_clip(manifest: DatasetManifest, entry: ManifestEntry | str) -> MediaClip:
    if isinstance(entry, str):
        try:
            entry = manifest.by_id()[entry]
        except KeyError:
            raise KeyError(f"clip {entry!r} not in manifest") from None
    root = manifest.root or Path(".")
    meta = json.loads((root / entry.meta).read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"{entry.clip_id}: unsupported format_version {meta.get('format_version')!r}")
    frames = np.fromfile(root / entry.frames, dtype="<f4").reshape(meta["frames_shape"])
    wave = np.fromfile(root / entry.audio, dtype="<f4").reshape(meta["audio_shape"])
    return MediaClip(frames.astype(np.float32), wave.astype(np.float32), entry.label,
                     entry.clip_id, entry.seed)
