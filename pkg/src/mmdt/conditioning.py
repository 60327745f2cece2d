"""Task masks, channel-concatenated video input, and in-context references.

Every video task is an inpainting problem: a binary mask ``M`` marks the
conditioned latent positions (1) and the ones to generate (0). The video
branch input is ``concat(V, I, M)`` along channels, with ``I`` holding the
condition latents and the black-frame latent everywhere else.

Reference latents are prepended along time and indexed ``-N .. -1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ParameterError, ShapeError
from .rope import RopePlan, condition_offset_indices, grid_indices, sequence_indices

TASK_KINDS = ("t2v", "i2v", "extend", "startend", "edit")


@dataclass
class TaskSpec:
    kind: str
    frames: int
    height: int
    width: int
    channels: int
    k: int | None = None
    edit_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ParameterError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if min(self.frames, self.height, self.width, self.channels) < 1:
            raise ParameterError(f"target dims must be positive, got {self.dims}")
        if self.kind == "extend":
            if self.k is None or not 1 <= self.k < self.frames:
                raise ParameterError(f"extension needs 1 <= k < T={self.frames}, got k={self.k}")
        if self.kind == "edit":
            if self.edit_mask is None:
                raise ParameterError("edit task needs a mask volume")
            self.edit_mask = np.asarray(self.edit_mask, dtype=np.float64)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.frames, self.height, self.width, self.channels

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "frames": self.frames, "height": self.height,
             "width": self.width, "channels": self.channels}
        if self.k is not None:
            d["k"] = self.k
        if self.edit_mask is not None:
            d["edit_mask"] = "".join(str(int(v)) for v in self.edit_mask.reshape(-1))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        dims = [int(d[k]) for k in ("frames", "height", "width")]
        mask = d.get("edit_mask")
        if isinstance(mask, str):
            mask = np.array([float(c) for c in mask]).reshape(*dims, 1)
        k = d.get("k")
        return cls(str(d["kind"]), *dims, int(d["channels"]),
                   k=None if k in (None, "") else int(k), edit_mask=mask)


def build_task_mask(spec: TaskSpec) -> np.ndarray:
    """Binary mask of shape (T, H, W, 1): 1 = condition, 0 = generate."""
    T, H, W, _ = spec.dims
    m = np.zeros((T, H, W, 1))
    if spec.kind == "i2v":
        m[0] = 1.0
    elif spec.kind == "extend":
        m[:spec.k] = 1.0
    elif spec.kind == "startend":
        m[0] = 1.0
        m[T - 1] = 1.0
    elif spec.kind == "edit":
        if spec.edit_mask.shape != (T, H, W, 1):
            raise ShapeError(f"edit mask shape {spec.edit_mask.shape} != {(T, H, W, 1)}")
        _require_binary(spec.edit_mask, "edit mask")
        m[...] = spec.edit_mask
    return m


def build_loss_mask(spec: TaskSpec) -> np.ndarray:
    """Loss weight ``1 - M``: only generated positions are supervised."""
    return 1.0 - build_task_mask(spec)


def frame_flags(mask: np.ndarray) -> list[int]:
    """Per-frame flag of a mask whose frames are uniformly 0 or 1."""
    per = mask.reshape(mask.shape[0], -1)
    if not np.all(per == per[:, :1]):
        raise DomainError("mask frames are not spatially uniform")
    return [int(v) for v in per[:, 0]]


def _require_binary(mask: np.ndarray, what: str):
    if not np.all((mask == 0) | (mask == 1)):
        raise DomainError(f"{what} must be binary (0/1)")


class LatentCodec:
    """Fixed patchify projection standing in for a VAE.

    A ``patch x patch x pixel_channels`` block maps linearly (plus bias) to
    ``latent_channels``; decoding uses the pseudo-inverse. The projection is
    drawn once from ``seed``.
    """

    def __init__(self, latent_channels: int, patch: int = 2, pixel_channels: int = 3, seed: int = 0):
        rng = np.random.default_rng(np.random.Philox(seed))
        self.patch = patch
        self.pixel_channels = pixel_channels
        self.latent_channels = latent_channels
        n_in = patch * patch * pixel_channels
        self.weight = rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, latent_channels))
        self.bias = rng.normal(0.0, 0.5, latent_channels)

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        """(T, H*p, W*p, P) pixels -> (T, H, W, C) latents."""
        T, Hp, Wp, P = pixels.shape
        p = self.patch
        if Hp % p or Wp % p or P != self.pixel_channels:
            raise ShapeError(f"pixels {pixels.shape} not divisible into {p}x{p}x{self.pixel_channels} patches")
        blocks = pixels.reshape(T, Hp // p, p, Wp // p, p, P).transpose(0, 1, 3, 2, 4, 5)
        return blocks.reshape(T, Hp // p, Wp // p, -1) @ self.weight + self.bias

    def decode(self, latents: np.ndarray) -> np.ndarray:
        T, H, W, _ = latents.shape
        p = self.patch
        flat = (latents - self.bias) @ np.linalg.pinv(self.weight)
        blocks = flat.reshape(T, H, W, p, p, self.pixel_channels).transpose(0, 1, 3, 2, 4, 5)
        return blocks.reshape(T, H * p, W * p, self.pixel_channels)

    def black_latent(self) -> np.ndarray:
        """Latent of an all-zero frame: one value per channel."""
        zero = np.zeros((1, self.patch, self.patch, self.pixel_channels))
        return self.encode(zero).reshape(self.latent_channels)


@dataclass
class ChannelInput:
    V: object  # np.ndarray or Tensor, (T, H, W, C)
    I: np.ndarray
    M: np.ndarray
    z_input: object  # (T, H, W, 2C + 1), Tensor when V is a Tensor

    @property
    def channels(self) -> int:
        return self.I.shape[-1]


def fill_condition_frames(cond_frames: np.ndarray, mask: np.ndarray, black: np.ndarray) -> np.ndarray:
    """Keep condition latents where M = 1, black latent elsewhere."""
    return np.where(mask == 1, cond_frames, np.broadcast_to(black, cond_frames.shape))


def assemble_channel_input(v_noisy, cond_frames, mask, black=None) -> ChannelInput:
    """``Z_input = concat(V, I, M)`` along the last axis, channel order fixed as V | I | M."""
    V = v_noisy
    v_shape = V.shape
    I = np.asarray(cond_frames, dtype=np.float64)
    M = np.asarray(mask, dtype=np.float64)
    if len(v_shape) != 4 or I.shape != tuple(v_shape):
        raise ShapeError(f"noisy latent {tuple(v_shape)} and condition frames {I.shape} must match (T,H,W,C)")
    if M.shape != tuple(v_shape[:3]) + (1,):
        raise ShapeError(f"mask shape {M.shape} != {tuple(v_shape[:3]) + (1,)}")
    _require_binary(M, "mask")
    black = np.zeros(I.shape[-1]) if black is None else np.asarray(black, dtype=np.float64)
    I = fill_condition_frames(I, M, black)
    if isinstance(V, Tensor):
        z = ad.concat([V, Tensor(I), Tensor(M)], axis=-1)
    else:
        V = np.asarray(V, dtype=np.float64)
        z = np.concatenate([V, I, M], axis=-1)
    return ChannelInput(V, I, M, z)


def split_channel_input(z: np.ndarray, channels: int):
    """Inverse of :func:`assemble_channel_input` on the assembled array."""
    z = np.asarray(z)
    if z.shape[-1] != 2 * channels + 1:
        raise ShapeError(f"expected {2 * channels + 1} channels, got {z.shape[-1]}")
    return z[..., :channels], z[..., channels:2 * channels], z[..., 2 * channels:]


def pad_reference(ref: np.ndarray, height: int, width: int, black: np.ndarray) -> np.ndarray:
    """Center-pad a (f, h, w, C) reference to (f, height, width, C) with the black latent."""
    f, h, w, C = ref.shape
    if h > height or w > width:
        raise ShapeError(f"reference {h}x{w} larger than video grid {height}x{width}")
    out = np.empty((f, height, width, C))
    out[...] = np.asarray(black, dtype=np.float64)
    top, left = (height - h) // 2, (width - w) // 2
    out[:, top:top + h, left:left + w] = ref
    return out


@dataclass
class ReferenceSet:
    """Reference latents in prompt order. Tags: 'image', 'clip' or 'audio'."""

    latents: list = field(default_factory=list)
    tags: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.latents) != len(self.tags):
            raise ShapeError(f"{len(self.latents)} latents but {len(self.tags)} tags")
        for tag in self.tags:
            if tag not in ("image", "clip", "audio"):
                raise ParameterError(f"unknown reference tag {tag!r}")
        self.latents = [np.asarray(x, dtype=np.float64) for x in self.latents]

    def __len__(self):
        return len(self.latents)

    def visual(self) -> list[np.ndarray]:
        return [x for x, t in zip(self.latents, self.tags) if t != "audio"]

    def audio(self) -> list[np.ndarray]:
        return [x for x, t in zip(self.latents, self.tags) if t == "audio"]

    @property
    def n_cond(self) -> int:
        return sum(x.shape[0] for x in self.visual())

    def padded(self, height: int, width: int, black: np.ndarray) -> "ReferenceSet":
        lat = [x if t == "audio" else pad_reference(x, height, width, black)
               for x, t in zip(self.latents, self.tags)]
        return ReferenceSet(lat, list(self.tags))


def grid_rope(head_dim: int, axis_split=None, base: float = 10000.0) -> Callable:
    """Builder ``(t_indices, H, W) -> RopePlan`` for video grids."""
    def build(t_indices: Sequence[int], height: int, width: int) -> RopePlan:
        return RopePlan(head_dim, grid_indices(list(t_indices), height, width), axis_split, base)
    return build


def reference_channel_input(ref: np.ndarray) -> np.ndarray:
    """Lift a clean (f, H, W, C) reference to the 2C + 1 video input layout: (ref | ref | 1)."""
    return np.concatenate([ref, ref, np.ones(ref.shape[:3] + (1,))], axis=-1)


def prepend_references(refs: ReferenceSet | Sequence[np.ndarray] | None, z_video, rope_builder: Callable):
    """``Z_attn = [Z_cond; Z_video]`` along time, with offset temporal rope indices.

    ``refs`` latents must already share ``z_video``'s spatial grid and channel
    count. Returns ``(Z_attn, RopePlan)``; generated frames are indexed 0..T-1.
    """
    if refs is None:
        lat = []
    elif isinstance(refs, ReferenceSet):
        lat = refs.visual()
    else:
        lat = [np.asarray(r, dtype=np.float64) for r in refs]
    T, H, W = z_video.shape[:3]
    for r in lat:
        if r.ndim != 4 or r.shape[1:] != tuple(z_video.shape[1:]):
            raise ShapeError(f"reference {r.shape} does not match video grid {tuple(z_video.shape)}")
    t_idx = condition_offset_indices([r.shape[0] for r in lat]) + list(range(T))
    plan = rope_builder(t_idx, H, W)
    if not lat:
        return z_video, plan
    cond = np.concatenate(lat, axis=0)
    if isinstance(z_video, Tensor):
        return ad.concat([Tensor(cond), z_video], axis=0), plan
    return np.concatenate([cond, np.asarray(z_video)], axis=0), plan


def prepend_audio_references(refs: Sequence[np.ndarray], z_audio, head_dim: int,
                             temporal_scale: float, axis_split=None, base: float = 10000.0):
    """Audio analogue of :func:`prepend_references` on (L, C) token sequences."""
    refs = [np.asarray(r, dtype=np.float64) for r in refs]
    L = z_audio.shape[0]
    t_idx = condition_offset_indices([r.shape[0] for r in refs]) + list(range(L))
    plan = RopePlan(head_dim, sequence_indices(t_idx), axis_split, base, temporal_scale)
    if not refs:
        return z_audio, plan
    cond = np.concatenate(refs, axis=0)
    if isinstance(z_audio, Tensor):
        return ad.concat([Tensor(cond), z_audio], axis=0), plan
    return np.concatenate([cond, np.asarray(z_audio)], axis=0), plan


def audio_input_tokens(x):
    """Validate an audio-branch latent; the channel-concatenation path is video-only."""
    if isinstance(x, ChannelInput):
        raise TypeError("audio branch does not accept a ChannelInput; inpainting is video-only")
    if x.ndim != 2:
        raise ShapeError(f"audio latent must be (tokens, channels), got {x.shape}")
    return x


@dataclass
class ConditionBundle:
    """Everything a forward pass conditions on besides the noisy latents."""

    text: np.ndarray                     # (n_text, model_dim) prompt embedding
    cond_frames: np.ndarray              # I, (T, H, W, C)
    mask: np.ndarray                     # M, (T, H, W, 1)
    audio_len: int
    black: np.ndarray | None = None      # (C,) black-frame latent
    references: ReferenceSet | None = None
    t: float | None = None

    def __post_init__(self):
        self.text = np.atleast_2d(np.asarray(self.text, dtype=np.float64))
        if self.text.shape[0] < 1:
            raise ShapeError("text embedding needs at least one token")
        self.mask = np.asarray(self.mask, dtype=np.float64)
        _require_binary(self.mask, "mask")
        if self.black is None:
            self.black = np.zeros(self.cond_frames.shape[-1])
        self.cond_frames = fill_condition_frames(np.asarray(self.cond_frames, dtype=np.float64),
                                                 self.mask, self.black)

    @property
    def video_shape(self) -> tuple:
        return self.cond_frames.shape
