"""Dual-stream / single-stream transformer blocks and the twin audio-video backbone.

One backbone layer, per branch, runs:

    self-attention (dual- or single-stream, jointly over modality + text tokens)
    -> text cross-attention (video always, audio when enabled)
    -> audio-video cross-attention pair (audio reads video, then video reads updated audio)
    -> MLP

Residual branches of self-attention and MLP are gated by adaLN gates that
start at zero; cross-attention output projections start at zero. A freshly
built backbone is therefore the identity on its hidden states.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError, ShapeError, UsageError
from .nn import Linear, Module
from .rope import RopePlan, apply_rope, identity_plan

MaskFn = Callable[[np.ndarray, np.ndarray], "np.ndarray | None"]


@dataclass
class ModelConfig:
    m_dual: int = 2
    n_single: int = 2
    model_dim: int = 64
    head_count: int = 4
    mlp_ratio: int = 4
    timestep_embed_dim: int = 32
    latent_channels: int = 4
    audio_channels: int = 4
    audio_text_xattn: bool = True
    text_rope: bool = False
    rope_base: float = 10000.0
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.m_dual < 1 or self.n_single < 0:
            raise ParameterError(f"need m_dual >= 1 and n_single >= 0, got {self.m_dual}, {self.n_single}")
        if self.head_count < 1 or self.model_dim % self.head_count:
            raise ParameterError(f"model_dim {self.model_dim} not divisible by head_count {self.head_count}")
        if self.head_dim % 2:
            raise ParameterError(f"head_dim {self.head_dim} must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.head_count

    @property
    def video_in_channels(self) -> int:
        # noisy latent | condition frames | mask
        return 2 * self.latent_channels + 1

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise ParameterError(f"unknown model config key {k!r}")
            default = getattr(cls, k)
            if isinstance(default, bool):
                out[k] = v if isinstance(v, bool) else str(v).strip().lower() in ("1", "true", "yes", "on")
            else:
                out[k] = type(default)(v)
        return cls(**out)


@dataclass
class TokenSequence:
    tokens: Tensor
    modality: str
    rope: RopePlan | None = None

    def __post_init__(self):
        if not isinstance(self.tokens, Tensor):
            self.tokens = Tensor(self.tokens)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"token sequence must be [len >= 1, dim], got {self.tokens.shape}")
        if self.modality not in ("video", "audio", "text", "mixed"):
            raise ParameterError(f"unknown modality {self.modality!r}")
        if self.rope is not None and len(self.rope) != len(self):
            raise ShapeError(f"{len(self)} tokens but rope plan indexes {len(self.rope)}")

    def __len__(self):
        return self.tokens.shape[0]

    def plan(self, head_dim: int) -> RopePlan:
        return self.rope if self.rope is not None else identity_plan(len(self), head_dim)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return x.reshape(n, heads, d // heads)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
              return_probs: bool = False):
    """Scaled dot-product attention on [tokens, heads, head_dim] inputs.

    Returns merged heads [n_q, heads * head_dim] (and the [heads, n_q, n_k]
    probabilities when ``return_probs``).
    """
    n_q, heads, dh = q.shape
    qh = ad.transpose(q, (1, 0, 2))
    kt = ad.transpose(k, (1, 2, 0))
    vh = ad.transpose(v, (1, 0, 2))
    scores = ad.matmul(qh, kt) * (1.0 / math.sqrt(dh))
    probs = ad.softmax_lastdim(scores, mask)
    out = ad.transpose(ad.matmul(probs, vh), (1, 0, 2)).reshape(n_q, heads * dh)
    return (out, probs) if return_probs else out


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


class StreamParams(Module):
    """adaLN + QKV + output projection + MLP for one stream (or a shared single stream)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.cfg = cfg
        self.modulation = Linear(d, 6 * d, rng, zero=True)
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        self.fc1 = Linear(d, cfg.mlp_ratio * d, rng)
        self.fc2 = Linear(cfg.mlp_ratio * d, d, rng)

    def modulation_chunks(self, c: Tensor) -> list[Tensor]:
        """shift/scale/gate for attention, then shift/scale/gate for the MLP."""
        return ad.split(self.modulation(ad.silu(c)), [self.cfg.model_dim] * 6, axis=1)

    def qkv_heads(self, x: Tensor, shift: Tensor, scale: Tensor):
        h = _modulate(ad.layer_norm(x, eps=self.cfg.ln_eps), shift, scale)
        q, k, v = ad.split(self.qkv(h), [self.cfg.model_dim] * 3, axis=1)
        heads = self.cfg.head_count
        return split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)

    def mlp(self, x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
        h = _modulate(ad.layer_norm(x, eps=self.cfg.ln_eps), shift, scale)
        return self.fc2(ad.gelu(self.fc1(h)))


def _check_width(cfg: ModelConfig, *seqs: Tensor):
    for s in seqs:
        if s.ndim != 2 or s.shape[1] != cfg.model_dim:
            raise ShapeError(f"expected tokens of width {cfg.model_dim}, got {s.shape}")


def _rotate_qk(q, k, plan: RopePlan):
    return apply_rope(q, plan), apply_rope(k, plan)


def _joint_mask(mask_fn: MaskFn | None, q: Tensor, k: Tensor):
    return None if mask_fn is None else mask_fn(q.data, k.data)


class DualStreamBlock(Module):
    """Separate parameters per stream, one attention over the concatenated tokens."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.x = StreamParams(cfg, rng)
        self.t = StreamParams(cfg, rng)

    def attend(self, x: TokenSequence, txt: TokenSequence, c: Tensor,
               mask_fn: MaskFn | None = None, return_probs: bool = False):
        _check_width(self.cfg, x.tokens, txt.tokens)
        mx = self.x.modulation_chunks(c)
        mt = self.t.modulation_chunks(c)
        qx, kx, vx = self.x.qkv_heads(x.tokens, mx[0], mx[1])
        qt, kt, vt = self.t.qkv_heads(txt.tokens, mt[0], mt[1])
        plan = x.plan(self.cfg.head_dim).concat(txt.plan(self.cfg.head_dim))
        q, k = _rotate_qk(ad.concat([qx, qt]), ad.concat([kx, kt]), plan)
        out = attention(q, k, ad.concat([vx, vt]), _joint_mask(mask_fn, q, k), return_probs)
        o, probs = out if return_probs else (out, None)
        ox, ot = ad.split(o, [len(x), len(txt)], axis=0)
        xo = TokenSequence(x.tokens + mx[2] * self.x.proj(ox), x.modality, x.rope)
        to = TokenSequence(txt.tokens + mt[2] * self.t.proj(ot), txt.modality, txt.rope)
        return (xo, to, probs) if return_probs else (xo, to)

    def feed_forward(self, x: TokenSequence, txt: TokenSequence, c: Tensor):
        mx = self.x.modulation_chunks(c)
        mt = self.t.modulation_chunks(c)
        xo = x.tokens + mx[5] * self.x.mlp(x.tokens, mx[3], mx[4])
        to = txt.tokens + mt[5] * self.t.mlp(txt.tokens, mt[3], mt[4])
        return TokenSequence(xo, x.modality, x.rope), TokenSequence(to, txt.modality, txt.rope)

    def __call__(self, x: TokenSequence, txt: TokenSequence, c: Tensor, mask_fn: MaskFn | None = None):
        return self.feed_forward(*self.attend(x, txt, c, mask_fn), c)

    def tie_streams(self) -> None:
        """Make the text stream share the modality stream's parameter objects."""
        self.t = self.x


class SingleStreamBlock(Module):
    """One shared parameter set over the mixed [modality; text] sequence."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.shared = StreamParams(cfg, rng)

    def attend(self, h: TokenSequence, c: Tensor, mask_fn: MaskFn | None = None):
        _check_width(self.cfg, h.tokens)
        m = self.shared.modulation_chunks(c)
        q, k, v = self.shared.qkv_heads(h.tokens, m[0], m[1])
        q, k = _rotate_qk(q, k, h.plan(self.cfg.head_dim))
        o = attention(q, k, v, _joint_mask(mask_fn, q, k))
        return TokenSequence(h.tokens + m[2] * self.shared.proj(o), h.modality, h.rope)

    def feed_forward(self, h: TokenSequence, c: Tensor) -> TokenSequence:
        m = self.shared.modulation_chunks(c)
        out = h.tokens + m[5] * self.shared.mlp(h.tokens, m[3], m[4])
        return TokenSequence(out, h.modality, h.rope)

    def __call__(self, h: TokenSequence, c: Tensor, mask_fn: MaskFn | None = None) -> TokenSequence:
        return self.feed_forward(self.attend(h, c, mask_fn), c)


def dual_stream_block(block: DualStreamBlock, x_v, x_t, t_cond, mask_fn=None):
    return block(x_v, x_t, t_cond, mask_fn)


def single_stream_block(block: SingleStreamBlock, x_mixed, t_cond, mask_fn=None):
    return block(x_mixed, t_cond, mask_fn)


class CrossAttention(Module):
    """``x + Attn(Q=x Wq, K=ctx Wk, V=ctx Wv) Wo``; ``Wo`` starts at zero."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.cfg = cfg
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng, zero=True)
        # debug hook: -1 flips the residual sign (fault injection for the verify suite)
        self.residual_sign = 1.0

    def __call__(self, x: TokenSequence, ctx: TokenSequence, q_plan: RopePlan | None = None,
                 k_plan: RopePlan | None = None, return_probs: bool = False):
        _check_width(self.cfg, x.tokens, ctx.tokens)
        if len(ctx) < 1:
            raise UsageError("cross-attention needs a non-empty context")
        heads = self.cfg.head_count
        q = split_heads(self.q(x.tokens), heads)
        k = split_heads(self.k(ctx.tokens), heads)
        v = split_heads(self.v(ctx.tokens), heads)
        if q_plan is not None:
            q = apply_rope(q, q_plan)
        if k_plan is not None:
            k = apply_rope(k, k_plan)
        o, probs = attention(q, k, v, return_probs=True)
        delta = self.out(o)
        if self.residual_sign != 1.0:
            delta = delta * self.residual_sign
        res = TokenSequence(x.tokens + delta, x.modality, x.rope)
        return (res, probs) if return_probs else res


def text_cross_attention(xattn: CrossAttention, x_v: TokenSequence, x_t: TokenSequence) -> TokenSequence:
    """Video queries read the text tokens; residual added to the post-self-attention video state."""
    return xattn(x_v, x_t)


class AVCrossAttention(Module):
    """Audio attends to video; then video attends to the already-updated audio.

    Both directions rotate queries/keys with temporal-only plans so audio
    token ``j`` (scaled) and video frame ``t`` share one timeline.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.audio_from_video = CrossAttention(cfg, rng)
        self.video_from_audio = CrossAttention(cfg, rng)

    def __call__(self, a: TokenSequence, v: TokenSequence):
        a_plan = a.rope.temporal_only() if a.rope is not None else None
        v_plan = v.rope.temporal_only() if v.rope is not None else None
        a_new = self.audio_from_video(a, v, a_plan, v_plan)
        v_new = self.video_from_audio(v, a_new, v_plan, a_plan)
        return a_new, v_new


def av_cross_attention(block: AVCrossAttention, a_i: TokenSequence, v_i: TokenSequence):
    return block(a_i, v_i)


class FinalHead(Module):
    def __init__(self, cfg: ModelConfig, out_channels: int, rng: np.random.Generator):
        self.cfg = cfg
        self.modulation = Linear(cfg.model_dim, 2 * cfg.model_dim, rng, zero=True)
        self.linear = Linear(cfg.model_dim, out_channels, rng)

    def __call__(self, h: Tensor, c: Tensor) -> Tensor:
        shift, scale = ad.split(self.modulation(ad.silu(c)), [self.cfg.model_dim] * 2, axis=1)
        return self.linear(_modulate(ad.layer_norm(h, eps=self.cfg.ln_eps), shift, scale))


class BranchLayer(Module):
    """Self-attention block plus the optional text cross-attention of one branch layer."""

    def __init__(self, cfg: ModelConfig, dual: bool, text_xattn: bool, rng: np.random.Generator):
        self.dual = dual
        self.block = DualStreamBlock(cfg, rng) if dual else SingleStreamBlock(cfg, rng)
        self.text_xattn = CrossAttention(cfg, rng) if text_xattn else None

    def self_attend(self, x: TokenSequence, txt: TokenSequence, c: Tensor, mask_fn=None):
        if self.dual:
            return self.block.attend(x, txt, c, mask_fn)
        mixed = _mix(x, txt, self.block.cfg.head_dim)
        out = self.block.attend(mixed, c, mask_fn)
        return _unmix(out, x, txt)

    def mlp(self, x: TokenSequence, txt: TokenSequence, c: Tensor):
        if self.dual:
            return self.block.feed_forward(x, txt, c)
        return _unmix(self.block.feed_forward(_mix(x, txt, self.block.cfg.head_dim), c), x, txt)


def _mix(x: TokenSequence, txt: TokenSequence, head_dim: int) -> TokenSequence:
    plan = x.plan(head_dim).concat(txt.plan(head_dim))
    return TokenSequence(ad.concat([x.tokens, txt.tokens]), "mixed", plan)


def _unmix(h: TokenSequence, x: TokenSequence, txt: TokenSequence):
    xs, ts = ad.split(h.tokens, [len(x), len(txt)], axis=0)
    return TokenSequence(xs, x.modality, x.rope), TokenSequence(ts, txt.modality, txt.rope)


class TwinBackbone(Module):
    """Parallel video and audio branches with per-layer audio-video exchange."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        depth = cfg.m_dual + cfg.n_single
        self.video_layers = [BranchLayer(cfg, i < cfg.m_dual, True, rng) for i in range(depth)]
        self.audio_layers = [BranchLayer(cfg, i < cfg.m_dual, cfg.audio_text_xattn, rng)
                             for i in range(depth)]
        self.av_layers = [AVCrossAttention(cfg, rng) for _ in range(depth)]

    def __call__(self, video: TokenSequence, audio: TokenSequence, text_v: TokenSequence,
                 text_a: TokenSequence, c_v: Tensor, c_a: Tensor, video_mask_fn: MaskFn | None = None):
        for vl, al, av in zip(self.video_layers, self.audio_layers, self.av_layers):
            v_new, tv_new = vl.self_attend(video, text_v, c_v, video_mask_fn)
            a_new, ta_new = al.self_attend(audio, text_a, c_a)
            # text cross-attention reads the layer-input text stream
            v_new = vl.text_xattn(v_new, text_v)
            if al.text_xattn is not None:
                a_new = al.text_xattn(a_new, text_a)
            a_new, v_new = av(a_new, v_new)
            video, text_v = vl.mlp(v_new, tv_new, c_v)
            audio, text_a = al.mlp(a_new, ta_new, c_a)
        return video, audio


def branch_forward(backbone: TwinBackbone, video_tokens, audio_tokens, text_tokens, t_cond,
                   video_mask_fn: MaskFn | None = None):
    """Run all layers of both branches; returns final (video, audio) hidden sequences.

    ``text_tokens`` is either one sequence shared by both branches or a
    ``(video_text, audio_text)`` pair; ``t_cond`` likewise.
    """
    tv, ta = text_tokens if isinstance(text_tokens, tuple) else (text_tokens, text_tokens)
    cv, ca = t_cond if isinstance(t_cond, tuple) else (t_cond, t_cond)
    return backbone(video_tokens, audio_tokens, tv, ta, cv, ca, video_mask_fn)


