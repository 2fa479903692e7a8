"""Dual-path audio-visual forgery detector.

Shared path: frozen encoders -> bidirectional cross-attention -> alignment KL
between the pooled video-to-audio and audio-to-video representations.

Specific path: trainable encoders -> pooled unimodal embeddings -> SimSiam-style
negative-cosine distillation between modalities.

Both paths are pooled, concatenated into a 4d integrated embedding and sent
through a small head that emits one real-vs-fake logit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import EncoderBundle, EncoderDims, FeatureSequence, LoraConfig

ABLATION_FLAGS = frozenset({
    "no_alignment", "no_cross_attention", "no_frozen", "no_distillation", "kd_as_kl", "video_only",
})
# flags that only make sense while the audio branch exists
AUDIO_DEPENDENT = frozenset({"no_alignment", "no_cross_attention", "no_distillation", "kd_as_kl"})


def check_flags(flags) -> frozenset[str]:
    flags = frozenset(flags or ())
    unknown = flags - ABLATION_FLAGS
    if unknown:
        raise ValueError(f"unknown ablation flags {sorted(unknown)}; known: {sorted(ABLATION_FLAGS)}")
    if "video_only" in flags and flags & AUDIO_DEPENDENT:
        raise ValueError(f"video_only cannot be combined with {sorted(flags & AUDIO_DEPENDENT)}")
    if {"no_distillation", "kd_as_kl"} <= flags:
        raise ValueError("no_distillation and kd_as_kl both replace the distillation term")
    return flags


@dataclass
class ModelConfig:
    dim: int = 64
    n_frames: int = 16
    n_samples: int = 8000
    image_size: int | None = None
    video_channels: int = 16
    audio_hidden: int = 128
    n_bins: int = 256
    n_bands: int = 64
    shared_grid: int = 2
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lambda_kl: float = 1.0
    lambda_kd: float = 1.0
    # "feature": softmax over the d features of the pooled vector; "token": over tokens
    kl_axis: str = "feature"
    # "pooled": one distribution per clip; "token": KL per token, averaged
    kl_granularity: str = "pooled"
    kl_symmetric: bool = False
    # which side of each distillation term is treated as a constant target
    stopgrad: str = "representation"
    projector_batch_norm: bool = False
    # shared tokens are centred over time and scaled before alignment, so the
    # attention sees motion rather than static appearance
    center_tokens: bool = True
    token_gain: float = 2.0
    # training-time probability of blanking each of the four embedding blocks
    path_dropout: float = 0.0
    # ordinary dropout on the head input
    head_dropout: float = 0.3
    frozen_seed: int = 1234
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kl_axis not in ("feature", "token"):
            raise ValueError(f"kl_axis must be 'feature' or 'token', got {self.kl_axis!r}")
        if self.kl_granularity not in ("pooled", "token"):
            raise ValueError(f"kl_granularity must be 'pooled' or 'token', got {self.kl_granularity!r}")
        if self.stopgrad not in ("representation", "projection"):
            raise ValueError(f"stopgrad must be 'representation' or 'projection', got {self.stopgrad!r}")
        if not 0.0 <= self.path_dropout < 1.0:
            raise ValueError(f"path_dropout must lie in [0, 1), got {self.path_dropout}")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ValueError(f"head_dropout must lie in [0, 1), got {self.head_dropout}")
        if self.shared_grid < 1:
            raise ValueError(f"shared_grid must be >= 1, got {self.shared_grid}")
        if self.token_gain <= 0:
            raise ValueError(f"token_gain must be positive, got {self.token_gain}")
        if self.lambda_kl < 0 or self.lambda_kd < 0:
            raise ValueError("loss weights must be non-negative")
        self.flags = sorted(check_flags(self.flags))

    def encoder_dims(self) -> EncoderDims:
        return EncoderDims(self.dim, self.n_frames, self.n_samples, self.image_size,
                           self.video_channels, self.audio_hidden, self.n_bins, self.n_bands,
                           self.shared_grid)

    def lora(self) -> LoraConfig:
        return LoraConfig(self.lora_rank, self.lora_alpha)


# ---------------------------------------------------------------------------
# attention and losses


def cross_attention(query: torch.Tensor, kv: torch.Tensor, wq: torch.Tensor, wk: torch.Tensor,
                    wv: torch.Tensor, scaled: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention of ``query`` tokens over ``kv`` tokens.

    Projections are applied as ``x @ w.T``. Returns (output, weights) with
    weights of shape (..., T_q, T_kv), each row summing to one.
    """
    if query.shape[-1] != kv.shape[-1]:
        raise ValueError(f"token dims differ: {query.shape[-1]} vs {kv.shape[-1]}")
    q, k, v = query @ wq.T, kv @ wk.T, kv @ wv.T
    logits = q @ k.transpose(-1, -2)
    if scaled:
        logits = logits / math.sqrt(q.shape[-1])
    w = torch.softmax(logits, dim=-1)
    return w @ v, w


def cross_attention_seq(query: FeatureSequence, kv: FeatureSequence, wq, wk, wv):
    if query.n_tokens != kv.n_tokens:
        raise ValueError(f"token counts differ: {query.n_tokens} vs {kv.n_tokens}")
    if query.path != kv.path:
        raise ValueError("cross-attention expects both sequences from the same path")
    return cross_attention(query.tokens, kv.tokens, wq, wk, wv)


def _kl_rows(p_logits: torch.Tensor, q_logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    logp = torch.log_softmax(p_logits, dim=dim)
    logq = torch.log_softmax(q_logits, dim=dim)
    return (logp.exp() * (logp - logq)).sum(dim=dim)


def alignment_kl_loss(x_v2a: torch.Tensor, x_a2v: torch.Tensor, axis: str = "feature",
                      granularity: str = "pooled", symmetric: bool = False) -> torch.Tensor:
    """KL(P || Q) with P = softmax(x_v2a), Q = softmax(x_a2v).

    A 1-d input is one already-pooled logit vector. Otherwise the last two
    dims are (tokens, features): "pooled" granularity averages tokens first,
    "token" computes one KL per token (or per feature when ``axis`` is
    "token") and averages. Leading batch dims are averaged.
    """
    if x_v2a.shape != x_a2v.shape:
        raise ValueError(f"shape mismatch {tuple(x_v2a.shape)} vs {tuple(x_a2v.shape)}")

    def one_way(p, q):
        if p.ndim == 1:
            return _kl_rows(p, q)
        dim = -1 if axis == "feature" else -2
        if granularity == "pooled":
            pool = -2 if axis == "feature" else -1
            return _kl_rows(p.mean(pool), q.mean(pool)).mean()
        return _kl_rows(p, q, dim=dim).mean()

    loss = one_way(x_v2a, x_a2v)
    if symmetric:
        loss = 0.5 * (loss + one_way(x_a2v, x_v2a))
    return loss


def pooled_kl(p_vec: torch.Tensor, q_vec: torch.Tensor) -> torch.Tensor:
    """KL between feature-axis softmaxes of pooled (..., d) vectors, batch-averaged."""
    if p_vec.shape != q_vec.shape:
        raise ValueError(f"shape mismatch {tuple(p_vec.shape)} vs {tuple(q_vec.shape)}")
    return _kl_rows(p_vec, q_vec).mean()


def _normalize(x: torch.Tensor, side: str) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise ZeroDivisionError(f"cannot L2-normalise a zero {side} vector")
    return x / norm


def negative_cosine(online: torch.Tensor, target: torch.Tensor, online_name: str = "online",
                    target_name: str = "target") -> torch.Tensor:
    return -(_normalize(online, online_name) * _normalize(target, target_name)).sum(-1)


def simsiam_distillation_loss(x_v_u: torch.Tensor, x_a_u: torch.Tensor, projector_v, projector_a,
                              stopgrad: str = "representation") -> torch.Tensor:
    """Mean of the two cross-modal negative-cosine terms.

    Dist1 pairs the video embedding with the audio projection, Dist2 the
    audio embedding with the video projection. With ``stopgrad`` set to
    "representation" the embeddings are the constant targets and gradients
    flow through the projections (the usual SimSiam arrangement, where the
    predictor sits on the online branch); "projection" detaches the
    projections instead.
    """
    z_a = projector_a(x_a_u)
    z_v = projector_v(x_v_u)
    if stopgrad == "representation":
        d1 = negative_cosine(z_a, x_v_u.detach(), "z_a", "x_v")
        d2 = negative_cosine(z_v, x_a_u.detach(), "z_v", "x_a")
    else:
        d1 = negative_cosine(x_v_u, z_a.detach(), "x_v", "z_a")
        d2 = negative_cosine(x_a_u, z_v.detach(), "x_a", "z_v")
    return ((d1 + d2) / 2).mean()


# ---------------------------------------------------------------------------
# modules


class CrossAttention(nn.Module):
    """Learned Q/K/V projections plus a learnable distance penalty on the logits.

    The penalty ``-slope * |t - s|`` starts at slope 1, so queries initially
    favour keys at the same time step; training can weaken or sharpen it.
    """

    def __init__(self, dim: int, n_tokens: int):
        super().__init__()
        self.wq = nn.Parameter(torch.eye(dim) + 0.02 * torch.randn(dim, dim))
        self.wk = nn.Parameter(torch.eye(dim) + 0.02 * torch.randn(dim, dim))
        self.wv = nn.Parameter(torch.empty(dim, dim))
        nn.init.xavier_uniform_(self.wv)
        self.slope = nn.Parameter(torch.ones(()))
        idx = torch.arange(n_tokens, dtype=torch.float32)
        self.register_buffer("distance", (idx[:, None] - idx[None, :]).abs(), persistent=False)

    def forward(self, query, kv):
        q, k, v = query @ self.wq.T, kv @ self.wk.T, kv @ self.wv.T
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        logits = logits - self.slope * self.distance.to(logits.dtype)
        w = torch.softmax(logits, dim=-1)
        return w @ v, w


class AlignmentBlock(nn.Module):
    """Residual cross-attention followed by a token-wise feed-forward layer."""

    def __init__(self, dim: int, n_tokens: int):
        super().__init__()
        self.attn = CrossAttention(dim, n_tokens)
        self.norm = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, query, kv, use_attention: bool = True):
        if use_attention:
            attended, w = self.attn(query, kv)
        else:
            # identity pass-through: every token attends only to itself in its own stream
            attended = query
            T = query.shape[-2]
            w = torch.eye(T, dtype=query.dtype).expand(*query.shape[:-2], T, T)
        h = self.norm(query + attended)
        return h + self.ff(h), w


class Projector(nn.Module):
    """Projection MLP followed by a bottleneck predictor, SimSiam style.

    With ``batch_norm`` the hidden layers are batch-normalised as in SimSiam.
    That rules out a constant prediction but also forces the specific
    encoders to carry whatever the other modality can predict, which on the
    synthetic clips crowds out the artifact features; it is off by default.
    """

    def __init__(self, dim: int, batch_norm: bool = True):
        super().__init__()
        norm = (lambda n: nn.BatchNorm1d(n)) if batch_norm else (lambda n: nn.Identity())
        self.projector = nn.Sequential(nn.Linear(dim, dim), norm(dim), nn.GELU(), nn.Linear(dim, dim), norm(dim))
        self.predictor = nn.Sequential(nn.Linear(dim, dim // 2), norm(dim // 2), nn.GELU(),
                                       nn.Linear(dim // 2, dim))

    def forward(self, x):
        return self.predictor(self.projector(x))


@dataclass
class AlignmentOutputs:
    x_v2a: torch.Tensor  # (B, T, d)
    x_a2v: torch.Tensor
    attention_v2a: torch.Tensor  # (B, T, T)
    attention_a2v: torch.Tensor


@dataclass
class DistillationOutputs:
    z_v: torch.Tensor  # (B, d)
    z_a: torch.Tensor
    x_v_u: torch.Tensor
    x_a_u: torch.Tensor


@dataclass
class ForwardOutputs:
    logit: torch.Tensor  # (B,)
    embedding: torch.Tensor  # (B, 4d)
    shared: AlignmentOutputs
    specific: DistillationOutputs
    video_tokens: torch.Tensor
    audio_tokens: torch.Tensor


@dataclass
class LossBundle:
    l_cls: float
    l_kl: float
    l_kd: float
    lambda_kl: float
    lambda_kd: float
    total: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


class CADModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.flags = frozenset(cfg.flags)
        self.encoders = EncoderBundle(cfg.encoder_dims(), cfg.lora(), cfg.frozen_seed)
        d = cfg.dim
        self.v2a = AlignmentBlock(d, cfg.n_frames)
        self.a2v = AlignmentBlock(d, cfg.n_frames)
        self.project_v = Projector(d, cfg.projector_batch_norm)
        self.project_a = Projector(d, cfg.projector_batch_norm)
        self.head = nn.Sequential(nn.Dropout(cfg.head_dropout), nn.Linear(4 * d, d), nn.GELU(), nn.Linear(d, 1))
        self.encoders.set_frozen("no_frozen" not in self.flags)

    @property
    def shared_frozen(self) -> bool:
        return self.encoders.frozen

    def shared_features(self, frames, wave):
        """Frozen-path inputs: full video tokens and the audio stem (pre-LoRA)."""
        enc = self.encoders
        with torch.set_grad_enabled(not self.shared_frozen and torch.is_grad_enabled()):
            video = enc.shared_video(frames)
            stem = enc.shared_audio.stem(wave)
        return video, stem

    def _prepare(self, tokens):
        if not self.cfg.center_tokens:
            return tokens
        return (tokens - tokens.mean(dim=-2, keepdim=True)) * self.cfg.token_gain

    def _drop_blocks(self, emb):
        p = self.cfg.path_dropout
        if not self.training or p == 0.0:
            return emb
        B = emb.shape[0]
        keep = (torch.rand(B, 4, 1, dtype=emb.dtype) >= p).to(emb.dtype) / (1.0 - p)
        return (emb.reshape(B, 4, -1) * keep).reshape(B, -1)

    def forward(self, frames, wave, shared=None) -> ForwardOutputs:
        flags = self.flags
        enc = self.encoders
        if shared is None:
            shared = self.shared_features(frames, wave)
        video, stem = shared
        video = self._prepare(video)

        if "video_only" in flags:
            x_v2a, w_v2a = self.v2a(video, video, use_attention=False)
            x_a2v = torch.zeros_like(x_v2a)
            w_a2v = torch.zeros_like(w_v2a)
            audio = torch.zeros_like(video)
        else:
            audio = self._prepare(enc.shared_audio.head(stem))
            use_attn = "no_cross_attention" not in flags
            x_v2a, w_v2a = self.v2a(video, audio, use_attn)
            x_a2v, w_a2v = self.a2v(audio, video, use_attn)

        x_v_u = enc.specific_video(frames).mean(dim=1)
        if "video_only" in flags:
            x_a_u = torch.zeros_like(x_v_u)
        else:
            x_a_u = enc.specific_audio(wave).mean(dim=1)
        z_v = self.project_v(x_v_u)
        z_a = self.project_a(x_a_u)

        emb = torch.cat([x_v2a.mean(1), x_a2v.mean(1), x_v_u, x_a_u], dim=-1)
        logit = self.head(self._drop_blocks(emb)).squeeze(-1)
        return ForwardOutputs(logit, emb, AlignmentOutputs(x_v2a, x_a2v, w_v2a, w_a2v),
                              DistillationOutputs(z_v, z_a, x_v_u, x_a_u), video, audio)

    # losses -------------------------------------------------------------

    def kl_term(self, out: ForwardOutputs) -> torch.Tensor:
        cfg = self.cfg
        return alignment_kl_loss(out.shared.x_v2a, out.shared.x_a2v, cfg.kl_axis,
                                 cfg.kl_granularity, cfg.kl_symmetric)

    def kd_term(self, out: ForwardOutputs, targets: dict | None = None) -> torch.Tensor:
        """Distillation term. ``targets`` substitutes constant target vectors,
        which lets finite differences reproduce the stop-gradient semantics."""
        s = out.specific
        if "kd_as_kl" in self.flags:
            return pooled_kl(s.x_v_u, s.x_a_u)
        if self.cfg.stopgrad == "representation":
            tv = s.x_v_u.detach() if targets is None else targets["x_v_u"]
            ta = s.x_a_u.detach() if targets is None else targets["x_a_u"]
            d1 = negative_cosine(s.z_a, tv, "z_a", "x_v")
            d2 = negative_cosine(s.z_v, ta, "z_v", "x_a")
        else:
            tza = s.z_a.detach() if targets is None else targets["z_a"]
            tzv = s.z_v.detach() if targets is None else targets["z_v"]
            d1 = negative_cosine(s.x_v_u, tza, "x_v", "z_a")
            d2 = negative_cosine(s.x_a_u, tzv, "x_a", "z_v")
        return ((d1 + d2) / 2).mean()

    def stopgrad_targets(self, out: ForwardOutputs) -> dict:
        s = out.specific
        return {k: getattr(s, k).detach().clone() for k in ("x_v_u", "x_a_u", "z_v", "z_a")}

    def loss(self, out: ForwardOutputs, labels: torch.Tensor,
             targets: dict | None = None) -> tuple[torch.Tensor, LossBundle]:
        if labels.numel() == 0:
            raise ValueError("empty batch")
        flags, cfg = self.flags, self.cfg
        l_cls = F.binary_cross_entropy_with_logits(out.logit, labels.to(out.logit.dtype))
        zero = out.logit.new_zeros(())
        use_kl = not ({"no_alignment", "video_only"} & flags)
        use_kd = not ({"no_distillation", "video_only"} & flags)
        l_kl = self.kl_term(out) if use_kl else zero
        l_kd = self.kd_term(out, targets) if use_kd else zero
        total = l_cls + cfg.lambda_kl * l_kl + cfg.lambda_kd * l_kd
        bundle = LossBundle(l_cls.item(), l_kl.item(), l_kd.item(), cfg.lambda_kl, cfg.lambda_kd,
                            total.item())
        return total, bundle

    # parameter bookkeeping ---------------------------------------------

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        shared = dict(self.encoders.shared_parameters())
        lora = dict(self.encoders.lora_parameters())
        groups = {"frozen": [], "lora": [], "trainable": []}
        for name, p in self.named_parameters():
            short = name.removeprefix("encoders.")
            if short in lora:
                groups["lora"].append((name, p))
            elif short in shared and self.shared_frozen:
                groups["frozen"].append((name, p))
            else:
                groups["trainable"].append((name, p))
        return groups

    def trainable_parameters(self) -> list[nn.Parameter]:
        g = self.parameter_groups()
        return [p for _, p in g["lora"] + g["trainable"]]


def build_model(cfg: ModelConfig, seed: int = 0) -> CADModel:
    torch.manual_seed(seed)
    return CADModel(cfg)


def total_loss(model: CADModel, frames, wave, labels, shared=None) -> tuple[torch.Tensor, LossBundle]:
    out = model(frames, wave, shared)
    return model.loss(out, labels)


def ablation_forward(model: CADModel, frames, wave, labels, flags) -> tuple[torch.Tensor, LossBundle]:
    """Loss under ``flags``; the model's own flags are restored afterwards."""
    flags = check_flags(flags)
    saved = model.flags
    model.flags = flags
    was_frozen = model.shared_frozen
    model.encoders.set_frozen("no_frozen" not in flags)
    try:
        return total_loss(model, frames, wave, labels)
    finally:
        model.flags = saved
        model.encoders.set_frozen(was_frozen)
