"""Rotary position embeddings over (t, h, w) token grids.

Head dimensions are split into three contiguous blocks, one per axis; each
block is rotated pairwise by ``index * scale * base**(-2k / axis_dim)``.
Audio tokens use only the temporal block (spatial indices 0) and scale
their temporal frequencies so that audio and video share one timeline.
Condition (reference) frames sit at negative temporal indices, ending at
-1, so the first generated frame is t = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, rotate_pairs
from .errors import ParameterError, ShapeError


def default_axis_split(head_dim: int) -> tuple[int, int, int]:
    """Half of the head to time, a quarter to each spatial axis (all even)."""
    if head_dim <= 0 or head_dim % 2:
        raise ParameterError(f"head_dim must be a positive even integer, got {head_dim}")
    spatial = (head_dim // 4) // 2 * 2
    return head_dim - 2 * spatial, spatial, spatial


def audio_scale_factor(video_latent_frames: int, audio_latent_tokens: int) -> float:
    """Multiplier on audio temporal frequencies: video frames per audio token."""
    if video_latent_frames < 1 or audio_latent_tokens < 1:
        raise ParameterError(
            f"latent counts must be >= 1, got {video_latent_frames} and {audio_latent_tokens}")
    return video_latent_frames / audio_latent_tokens


def condition_offset_indices(ref_frame_counts) -> list[int]:
    """Temporal indices for prepended condition frames.

    Frames of all references are laid out contiguously in input order and
    numbered ``-N + i`` for ``i = 0..N-1`` where ``N`` is the total frame count.
    """
    counts = list(ref_frame_counts)
    if any(c < 1 for c in counts):
        raise ParameterError(f"reference frame counts must be >= 1, got {counts}")
    n = sum(counts)
    return [-n + i for i in range(n)]


def grid_indices(frames, height: int, width: int) -> np.ndarray:
    """(t, h, w) triples for a T x H x W grid in row-major token order.

    ``frames`` is either a frame count or an explicit list of temporal indices.
    """
    ts = np.arange(frames) if np.isscalar(frames) else np.asarray(frames)
    t, h, w = np.meshgrid(ts, np.arange(height), np.arange(width), indexing="ij")
    return np.stack([t.ravel(), h.ravel(), w.ravel()], axis=1).astype(np.int64)


def sequence_indices(temporal) -> np.ndarray:
    """(t, 0, 0) triples for a 1D token sequence (audio, text)."""
    t = np.arange(temporal) if np.isscalar(temporal) else np.asarray(temporal)
    out = np.zeros((len(t), 3), dtype=np.int64)
    out[:, 0] = t
    return out


@dataclass
class RopePlan:
    head_dim: int
    indices: np.ndarray
    axis_split: tuple[int, int, int] | None = None
    base: float = 10000.0
    temporal_scale: float = 1.0
    # per-token temporal scale; differs from temporal_scale only on concatenated plans
    token_scale: np.ndarray | None = None
    _angles: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.axis_split is None:
            self.axis_split = default_axis_split(self.head_dim)
        self.axis_split = tuple(int(a) for a in self.axis_split)
        if any(a < 0 or a % 2 for a in self.axis_split) or sum(self.axis_split) != self.head_dim:
            raise ParameterError(
                f"axis_split {self.axis_split} must be even and sum to head_dim {self.head_dim}")
        if not self.temporal_scale > 0:
            raise ParameterError(f"temporal_scale must be positive, got {self.temporal_scale}")
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        if self.token_scale is None:
            self.token_scale = np.full(len(self.indices), float(self.temporal_scale))
        self.token_scale = np.asarray(self.token_scale, dtype=np.float64)
        if self.token_scale.shape != (len(self.indices),):
            raise ShapeError(f"token_scale {self.token_scale.shape} does not match {len(self.indices)} tokens")

    def __len__(self):
        return len(self.indices)

    def _raw_frequencies(self) -> list[np.ndarray]:
        return [self.base ** (-2.0 * np.arange(dim // 2) / dim) if dim else np.zeros(0)
                for dim in self.axis_split]

    def frequencies(self) -> list[np.ndarray]:
        """Per-axis angular frequencies (temporal block already scaled)."""
        out = self._raw_frequencies()
        out[0] = out[0] * self.temporal_scale
        return out

    def angles(self) -> np.ndarray:
        """Rotation angle of every (token, pair): shape [tokens, head_dim // 2]."""
        if self._angles is None:
            pos = self.indices.astype(np.float64)
            pos[:, 0] *= self.token_scale
            parts = [pos[:, [axis]] * f[None, :] for axis, f in enumerate(self._raw_frequencies())]
            self._angles = np.concatenate(parts, axis=1)
        return self._angles

    def concat(self, other: "RopePlan") -> "RopePlan":
        """Plan for the token concatenation ``[self; other]``; each part keeps its own temporal scale."""
        if other.head_dim != self.head_dim or other.axis_split != self.axis_split or other.base != self.base:
            raise ParameterError("can only concatenate plans with equal head_dim, axis_split and base")
        return RopePlan(self.head_dim, np.concatenate([self.indices, other.indices]),
                        self.axis_split, self.base, self.temporal_scale,
                        np.concatenate([self.token_scale, other.token_scale]))

    def temporal_only(self) -> "RopePlan":
        idx = self.indices.copy()
        idx[:, 1:] = 0
        return RopePlan(self.head_dim, idx, self.axis_split, self.base, self.temporal_scale,
                        self.token_scale.copy())


def identity_plan(n_tokens: int, head_dim: int, axis_split=None) -> RopePlan:
    return RopePlan(head_dim, np.zeros((n_tokens, 3), dtype=np.int64), axis_split)


def apply_rope(x, plan: RopePlan) -> Tensor:
    """Rotate ``x`` of shape [tokens, heads, head_dim] according to ``plan``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"apply_rope expects [tokens, heads, head_dim], got {x.shape}")
    if x.shape[-1] != plan.head_dim:
        raise ShapeError(f"head_dim {x.shape[-1]} does not match plan head_dim {plan.head_dim}")
    if x.shape[0] != len(plan):
        raise ShapeError(f"{x.shape[0]} tokens but plan indexes {len(plan)}")
    ang = plan.angles()[:, None, :]
    return rotate_pairs(x, np.cos(ang), np.sin(ang))
