"""Full joint video/audio velocity model: embeddings, twin backbone, output heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .blocks import FinalHead, ModelConfig, TokenSequence, TwinBackbone, branch_forward
from .conditioning import (ConditionBundle, assemble_channel_input, audio_input_tokens, grid_rope,
                           prepend_audio_references, prepend_references, reference_channel_input)
from .errors import ShapeError
from .nn import Linear, Module, TimestepEmbedder
from .rope import audio_scale_factor, sequence_indices, RopePlan
from .vsa import grid_mask_fn


@dataclass(frozen=True)
class SparseSpec:
    """Block-sparse self-attention over the video grid: cube dims and cubes kept per query cube."""

    cube_dims: tuple[int, int, int]
    K: int


@dataclass
class EncodedInputs:
    video: TokenSequence
    audio: TokenSequence
    text_v: TokenSequence
    text_a: TokenSequence
    c_v: Tensor
    c_a: Tensor
    n_video_cond: int
    n_audio_cond: int
    grid: tuple[int, int, int]


class JointAVModel(Module):
    """Predicts video and audio velocities from noisy latents, timestep and conditions."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.model_dim
        self.cfg = cfg
        self.video_in = Linear(cfg.video_in_channels, d, rng)
        self.audio_in = Linear(cfg.audio_channels, d, rng)
        self.text_v = Linear(d, d, rng)
        self.text_a = Linear(d, d, rng)
        self.time_v = TimestepEmbedder(cfg.timestep_embed_dim, d, rng)
        self.time_a = TimestepEmbedder(cfg.timestep_embed_dim, d, rng)
        self.backbone = TwinBackbone(cfg, rng)
        self.video_head = FinalHead(cfg, cfg.latent_channels, rng)
        self.audio_head = FinalHead(cfg, cfg.audio_channels, rng)

    # -- input assembly ----------------------------------------------------
    def encode(self, z_input, z_a_t, t: float, text: np.ndarray, references=None) -> EncodedInputs:
        """Embed an assembled (T, H, W, 2C+1) video input and (L, Ca) audio latent."""
        cfg = self.cfg
        z_input = z_input if isinstance(z_input, Tensor) else Tensor(z_input)
        z_a_t = audio_input_tokens(z_a_t if isinstance(z_a_t, Tensor) else Tensor(z_a_t))
        if z_input.ndim != 4 or z_input.shape[-1] != cfg.video_in_channels:
            raise ShapeError(f"video input must be (T,H,W,{cfg.video_in_channels}), got {z_input.shape}")
        if z_a_t.shape[-1] != cfg.audio_channels:
            raise ShapeError(f"audio latent must have {cfg.audio_channels} channels, got {z_a_t.shape}")
        T, H, W, _ = z_input.shape
        L = z_a_t.shape[0]
        vis = [reference_channel_input(r) for r in references.visual()] if references else []
        aud = references.audio() if references else []
        rope_build = grid_rope(cfg.head_dim, base=cfg.rope_base)
        z_attn, v_plan = prepend_references(vis, z_input, rope_build)
        n_vc = int(sum(r.shape[0] for r in vis)) * H * W
        scale = audio_scale_factor(T, L)
        a_tokens, a_plan = prepend_audio_references(aud, z_a_t, cfg.head_dim, scale, base=cfg.rope_base)
        n_ac = int(sum(r.shape[0] for r in aud))

        video = TokenSequence(self.video_in(z_attn.reshape(-1, cfg.video_in_channels)), "video", v_plan)
        audio = TokenSequence(self.audio_in(a_tokens), "audio", a_plan)
        txt = Tensor(text)
        if txt.shape[-1] != cfg.model_dim:
            raise ShapeError(f"text embedding width {txt.shape[-1]} != model_dim {cfg.model_dim}")
        t_plan = (RopePlan(cfg.head_dim, sequence_indices(txt.shape[0]), base=cfg.rope_base)
                  if cfg.text_rope else None)
        text_v = TokenSequence(self.text_v(txt), "text", t_plan)
        text_a = TokenSequence(self.text_a(txt), "text", t_plan)
        return EncodedInputs(video, audio, text_v, text_a, self.time_v(t), self.time_a(t),
                             n_vc, n_ac, (T, H, W))

    def video_mask_fn(self, enc: EncodedInputs, sparse: SparseSpec | None):
        if sparse is None:
            return None
        return grid_mask_fn(enc.grid, sparse.cube_dims, sparse.K, enc.n_video_cond)

    # -- forward -----------------------------------------------------------
    def hidden(self, enc: EncodedInputs, sparse: SparseSpec | None = None):
        return branch_forward(self.backbone, enc.video, enc.audio, (enc.text_v, enc.text_a),
                              (enc.c_v, enc.c_a), self.video_mask_fn(enc, sparse))

    def decode(self, enc: EncodedInputs, video: TokenSequence, audio: TokenSequence):
        T, H, W = enc.grid
        hv = video.tokens[enc.n_video_cond:]
        ha = audio.tokens[enc.n_audio_cond:]
        pred_v = self.video_head(hv, enc.c_v).reshape(T, H, W, self.cfg.latent_channels)
        pred_a = self.audio_head(ha, enc.c_a)
        return pred_v, pred_a

    def forward_input(self, z_input, z_a_t, t: float, text, references=None,
                      sparse: SparseSpec | None = None):
        enc = self.encode(z_input, z_a_t, t, text, references)
        return self.decode(enc, *self.hidden(enc, sparse))

    def __call__(self, z_v_t, z_a_t, t: float, cond: ConditionBundle, sparse: SparseSpec | None = None):
        ci = assemble_channel_input(z_v_t if isinstance(z_v_t, Tensor) else np.asarray(z_v_t),
                                    cond.cond_frames, cond.mask, cond.black)
        refs = cond.references
        if refs:
            refs = refs.padded(ci.I.shape[1], ci.I.shape[2], cond.black)
        return self.forward_input(ci.z_input, z_a_t, t, cond.text, refs, sparse)


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> JointAVModel:
    cfg = cfg or ModelConfig()
    return JointAVModel(cfg, np.random.default_rng(np.random.Philox(seed)))
