"""Feature extractors for both paths of the detector.

Shared path: frozen, fixed-seed stand-ins for the large pretrained image and
speech encoders. The audio one carries LoRA adapters on its last two
projections, which are the only trainable weights on that path.

Specific path: trainable encoders for low-level traces. The video encoder has
a per-frame spatial stage followed by a cross-frame temporal stage; the audio
encoder works on a log-magnitude spectrogram.

Audio is always cut into exactly T equal segments so that audio token t lines
up with video frame t.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

# per-channel normalisation used by common image-text encoders
IMAGE_MEAN = (0.4815, 0.4578, 0.4082)
IMAGE_STD = (0.2686, 0.2613, 0.2758)
LOG_FLOOR = 1e-5


class Modality(str, enum.Enum):
    VIDEO = "VIDEO"
    AUDIO = "AUDIO"


class FeaturePath(str, enum.Enum):
    SHARED = "SHARED"
    SPECIFIC = "SPECIFIC"


@dataclass
class FeatureSequence:
    tokens: torch.Tensor  # (T, d) or (B, T, d)
    modality: Modality
    path: FeaturePath

    def __post_init__(self):
        if not torch.isfinite(self.tokens).all():
            raise FloatingPointError(f"non-finite {self.modality.value}/{self.path.value} tokens")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    # which projections of the shared audio head are adapted
    target: tuple[str, ...] = ("proj1", "proj2")

    def __post_init__(self):
        if self.rank < 1 or self.alpha <= 0:
            raise ValueError(f"LoRA needs rank >= 1 and alpha > 0, got r={self.rank}, alpha={self.alpha}")
        self.target = tuple(self.target)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LoraLinear(nn.Module):
    """A frozen linear map plus a trainable rank-r update (alpha/r) * B A."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        d_out, d_in = base.weight.shape
        if rank >= min(d_in, d_out):
            raise ValueError(f"LoRA rank {rank} must be < min(d_in={d_in}, d_out={d_out})")
        self.base = base
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, d_in))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        self.enabled = True

    def forward(self, x):
        out = self.base(x)
        if self.enabled:
            out = out + self.scaling * (x @ self.lora_A.T) @ self.lora_B.T
        return out

    def lora_parameter_count(self) -> int:
        return self.lora_A.numel() + self.lora_B.numel()


def _check_frames(frames: torch.Tensor, n_frames: int):
    if frames.ndim != 5 or frames.shape[1] != n_frames or frames.shape[-1] != 3:
        raise ValueError(f"expected frames shaped (B, {n_frames}, H, W, 3), got {tuple(frames.shape)}")


def _check_audio(wave: torch.Tensor, n_frames: int, n_samples: int):
    if wave.ndim != 2 or wave.shape[1] != n_samples:
        raise ValueError(f"expected waveform shaped (B, {n_samples}), got {tuple(wave.shape)}")
    if n_samples % n_frames:
        raise ValueError("waveform length must split into one segment per frame")


def frame_audio(wave: torch.Tensor, n_frames: int) -> torch.Tensor:
    """(B, L) -> (B, T, L/T) aligned segments."""
    return wave.reshape(wave.shape[0], n_frames, -1)


def log_spectrum(segments: torch.Tensor, n_bins: int) -> torch.Tensor:
    """Hann-windowed log-magnitude spectrum of each segment, first ``n_bins`` bins."""
    n = segments.shape[-1]
    window = torch.hann_window(n, periodic=False, dtype=segments.dtype, device=segments.device)
    n_fft = max(2 * n_bins, n)
    mag = torch.fft.rfft(segments * window, n=n_fft).abs()[..., :n_bins]
    return torch.log(mag + LOG_FLOOR)


def _to_images(frames: torch.Tensor, size: int | None) -> torch.Tensor:
    B, T, H, W, C = frames.shape
    x = frames.reshape(B * T, H, W, C).permute(0, 3, 1, 2)
    if size is not None and (H, W) != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    mean = x.new_tensor(IMAGE_MEAN).view(1, 3, 1, 1)
    std = x.new_tensor(IMAGE_STD).view(1, 3, 1, 1)
    return (x - mean) / std


HIGHPASS_GAIN = 4.0


def high_pass(x: torch.Tensor) -> torch.Tensor:
    """Image minus its 3x3 box blur, per channel (edge-replicated)."""
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    return x - F.avg_pool2d(padded, 3, stride=1)


class SharedVideoEncoder(nn.Module):
    """Frozen per-frame conv stack; one token per frame.

    The conv maps are averaged onto a coarse ``grid`` x ``grid`` layout, so a
    token describes what is in each quadrant of the face rather than exactly
    where it sits.
    """

    def __init__(self, dim: int, n_frames: int, image_size: int | None = None, channels: int = 16,
                 grid: int = 2):
        super().__init__()
        self.n_frames = n_frames
        self.image_size = image_size
        self.conv1 = nn.Conv2d(3, channels // 2, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(channels // 2, channels, 3, stride=2, padding=1)
        self.pool = nn.AdaptiveAvgPool2d(grid)
        self.proj = nn.Linear(channels * grid * grid, dim)
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)

    def forward(self, frames):
        _check_frames(frames, self.n_frames)
        B = frames.shape[0]
        x = _to_images(frames, self.image_size)
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        x = self.pool(x).flatten(1)
        return self.norm(self.proj(x)).reshape(B, self.n_frames, -1)


class SharedAudioEncoder(nn.Module):
    """Frozen log-band front end and MLP; LoRA on the last two projections.

    ``stem`` holds everything upstream of the first adapted matrix so callers
    can cache it while LoRA weights train.
    """

    def __init__(self, dim: int, n_frames: int, n_samples: int, lora: LoraConfig,
                 n_bands: int = 64, hidden: int = 128):
        super().__init__()
        self.n_frames, self.n_samples, self.n_bands = n_frames, n_samples, n_bands
        self.band_width = 4
        self.proj0 = nn.Linear(n_bands, hidden)
        proj1 = nn.Linear(hidden, dim)
        proj2 = nn.Linear(dim, dim)
        self.proj1 = LoraLinear(proj1, lora.rank, lora.alpha) if "proj1" in lora.target else proj1
        self.proj2 = LoraLinear(proj2, lora.rank, lora.alpha) if "proj2" in lora.target else proj2
        self.norm = nn.LayerNorm(dim, elementwise_affine=False)

    def stem(self, wave):
        _check_audio(wave, self.n_frames, self.n_samples)
        spec = log_spectrum(frame_audio(wave, self.n_frames), self.n_bands * self.band_width)
        bands = spec.reshape(*spec.shape[:-1], self.n_bands, self.band_width).mean(-1)
        return F.gelu(self.proj0(bands))

    def head(self, hidden):
        return self.norm(self.proj2(F.gelu(self.proj1(hidden))))

    def forward(self, wave):
        return self.head(self.stem(wave))

    def lora_modules(self) -> list[LoraLinear]:
        return [m for m in (self.proj1, self.proj2) if isinstance(m, LoraLinear)]

    def set_lora(self, enabled: bool):
        for m in self.lora_modules():
            m.enabled = enabled


class SpecificVideoEncoder(nn.Module):
    """Trainable spatiotemporal encoder.

    Spatial stage: two convs applied to every frame independently, fed with
    the image and its high-pass residual.
    Temporal stage: a (3, 1, 1) convolution across neighbouring frames with a
    residual connection and edge replication, so a static clip maps to
    identical tokens while frame order still matters.
    """

    def __init__(self, dim: int, n_frames: int, image_size: int | None = None, channels: int = 16):
        super().__init__()
        self.n_frames = n_frames
        self.image_size = image_size
        self.conv1 = nn.Conv2d(6, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.temporal = nn.Conv3d(channels, channels, (3, 1, 1))
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.proj = nn.Linear(channels * 16, dim)

    def spatial(self, frames):
        x = _to_images(frames, self.image_size)
        x = torch.cat([x, HIGHPASS_GAIN * high_pass(x)], dim=1)
        x = F.gelu(self.conv1(x))
        return F.gelu(self.conv2(x))

    def temporal_mix(self, maps, B):
        _, C, h, w = maps.shape
        x = maps.reshape(B, self.n_frames, C, h, w).transpose(1, 2)  # B, C, T, h, w
        padded = torch.cat([x[:, :, :1], x, x[:, :, -1:]], dim=2)
        x = F.gelu(x + self.temporal(padded))
        return x.transpose(1, 2)  # B, T, C, h, w

    def activation_energy(self, frames):
        """(B, T, h, w) mean squared activation after the temporal stage."""
        _check_frames(frames, self.n_frames)
        maps = self.temporal_mix(self.spatial(frames), frames.shape[0])
        return (maps ** 2).mean(dim=2)

    def forward(self, frames):
        _check_frames(frames, self.n_frames)
        B = frames.shape[0]
        x = self.temporal_mix(self.spatial(frames), B)
        x = self.pool(x.flatten(0, 1)).flatten(1)
        return self.proj(x).reshape(B, self.n_frames, -1)


class SpecificAudioEncoder(nn.Module):
    """Trainable MLP over a full-resolution log-magnitude spectrogram."""

    def __init__(self, dim: int, n_frames: int, n_samples: int, n_bins: int = 256, hidden: int = 128):
        super().__init__()
        self.n_frames, self.n_samples, self.n_bins = n_frames, n_samples, n_bins
        self.fc1 = nn.Linear(n_bins, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, wave):
        _check_audio(wave, self.n_frames, self.n_samples)
        spec = log_spectrum(frame_audio(wave, self.n_frames), self.n_bins)
        # centre per clip so the loudness envelope does not swamp spectral shape
        spec = spec - spec.mean(dim=(1, 2), keepdim=True)
        return self.fc2(F.gelu(self.fc1(spec)))


@dataclass
class EncoderDims:
    dim: int = 64
    n_frames: int = 16
    n_samples: int = 8000
    image_size: int | None = None
    video_channels: int = 16
    audio_hidden: int = 128
    n_bins: int = 256
    n_bands: int = 64
    shared_grid: int = 2


class EncoderBundle(nn.Module):
    def __init__(self, dims: EncoderDims, lora: LoraConfig, frozen_seed: int = 1234):
        super().__init__()
        self.dims = dims
        # shared encoders come from a fixed seed regardless of the training seed
        with torch.random.fork_rng():
            torch.manual_seed(frozen_seed)
            self.shared_video = SharedVideoEncoder(dims.dim, dims.n_frames, dims.image_size,
                                                   dims.video_channels, dims.shared_grid)
            self.shared_audio = SharedAudioEncoder(dims.dim, dims.n_frames, dims.n_samples, lora,
                                                   dims.n_bands, dims.audio_hidden)
        self.specific_video = SpecificVideoEncoder(dims.dim, dims.n_frames, dims.image_size,
                                                   dims.video_channels)
        self.specific_audio = SpecificAudioEncoder(dims.dim, dims.n_frames, dims.n_samples,
                                                   dims.n_bins, dims.audio_hidden)
        self.set_frozen(True)

    def set_frozen(self, frozen: bool):
        """Freeze (or release) the shared encoders; LoRA weights stay trainable."""
        self.frozen = frozen
        for name, p in self.shared_parameters():
            p.requires_grad_(not frozen)

    def shared_parameters(self):
        for prefix, mod in (("shared_video", self.shared_video), ("shared_audio", self.shared_audio)):
            for name, p in mod.named_parameters():
                if "lora_" not in name:
                    yield f"{prefix}.{name}", p

    def lora_parameters(self):
        for name, p in self.shared_audio.named_parameters():
            if "lora_" in name:
                yield f"shared_audio.{name}", p


# functional entry points returning typed sequences for a single clip


def _batched(x: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    return (x.unsqueeze(0), True) if x.ndim == ndim - 1 else (x, False)


def encode_shared_video(bundle: EncoderBundle, frames: torch.Tensor) -> FeatureSequence:
    x, single = _batched(frames, 5)
    with torch.no_grad():
        out = bundle.shared_video(x)
    return FeatureSequence(out[0] if single else out, Modality.VIDEO, FeaturePath.SHARED)


def encode_shared_audio_with_lora(bundle: EncoderBundle, waveform: torch.Tensor,
                                  use_lora: bool = True) -> FeatureSequence:
    x, single = _batched(waveform, 2)
    bundle.shared_audio.set_lora(use_lora)
    try:
        out = bundle.shared_audio(x)
    finally:
        bundle.shared_audio.set_lora(True)
    return FeatureSequence(out[0] if single else out, Modality.AUDIO, FeaturePath.SHARED)


def encode_specific_video(bundle: EncoderBundle, frames: torch.Tensor) -> FeatureSequence:
    x, single = _batched(frames, 5)
    out = bundle.specific_video(x)
    return FeatureSequence(out[0] if single else out, Modality.VIDEO, FeaturePath.SPECIFIC)


def encode_specific_audio(bundle: EncoderBundle, waveform: torch.Tensor) -> FeatureSequence:
    x, single = _batched(waveform, 2)
    out = bundle.specific_audio(x)
    return FeatureSequence(out[0] if single else out, Modality.AUDIO, FeaturePath.SPECIFIC)
