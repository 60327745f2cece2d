"""Input assembly and forward pass of the super-resolution / interpolation refiner.

Conditioning latent = trilinear upsample of the low-res prediction, with
high-res keyframes spliced in at their frame positions, and (for
inpainting) the high-res source spliced in wherever the spatial mask says
"preserve". The DiT input is ``concat(noisy_hi, assembled[, mask])``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autodiff import Tensor
from .errors import DomainError, ParameterError, ShapeError
from .model import JointAVModel, SparseSpec


def upsample_latent(low: np.ndarray, target) -> np.ndarray:
    """Corner-aligned trilinear resize of (T, H, W, C) to target (T', H', W'); channels independent."""
    low = np.asarray(low, dtype=np.float64)
    if low.ndim != 4:
        raise ShapeError(f"latent must be (T, H, W, C), got {low.shape}")
    target = tuple(int(x) for x in target)
    if len(target) != 3 or any(o < i for o, i in zip(target, low.shape[:3])):
        raise ParameterError(f"target dims {target} must be >= source dims {low.shape[:3]}")
    # integer numerator first so coordinates landing on source samples are exact
    axes = [np.arange(o) * (i - 1) / (o - 1) if o > 1 else np.zeros(1)
            for o, i in zip(target, low.shape[:3])]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    out = np.empty(target + (low.shape[3],))
    for c in range(low.shape[3]):
        out[..., c] = ndimage.map_coordinates(low[..., c], coords, order=1, mode="nearest")
    return out


def default_keyframe_positions(frames: int, stride: int = 4) -> list[int]:
    """Every ``stride``-th frame plus the last one."""
    pos = list(range(0, frames, stride))
    if pos[-1] != frames - 1:
        pos.append(frames - 1)
    return pos


def splice_keyframes(interp: np.ndarray, keyframes) -> np.ndarray:
    """Overwrite frames at keyframe positions; ``keyframes`` is [(position, (H, W, C) latent), ...]."""
    out = np.array(interp, dtype=np.float64, copy=True)
    positions = [int(p) for p, _ in keyframes]
    if len(set(positions)) != len(positions):
        raise ParameterError(f"duplicate keyframe positions {positions}")
    if positions != sorted(positions):
        raise ParameterError(f"keyframe positions must be increasing, got {positions}")
    for p, frame in keyframes:
        if not 0 <= p < out.shape[0]:
            raise ParameterError(f"keyframe position {p} outside [0, {out.shape[0]})")
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != out.shape[1:]:
            raise ShapeError(f"keyframe {frame.shape} does not match frame shape {out.shape[1:]}")
        out[p] = frame
    return out


def _spatial_mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[None, :, :, None]
    elif m.ndim == 3:
        m = m[None] if m.shape[-1] == 1 else m[..., None]
    T, H, W = shape[:3]
    try:
        m = np.broadcast_to(m, (T, H, W, 1))
    except ValueError:
        raise ShapeError(f"mask {np.shape(mask)} does not broadcast to {(T, H, W, 1)}") from None
    if not np.all((m == 0) | (m == 1)):
        raise DomainError("spatial mask must be binary (0/1)")
    return m


def splice_inpaint(assembled: np.ndarray, source_hi: np.ndarray, spatial_mask) -> np.ndarray:
    """``mask * source + (1 - mask) * assembled``, selected exactly per element."""
    assembled = np.asarray(assembled, dtype=np.float64)
    source_hi = np.asarray(source_hi, dtype=np.float64)
    if assembled.shape != source_hi.shape:
        raise ShapeError(f"assembled {assembled.shape} != source {source_hi.shape}")
    m = _spatial_mask(spatial_mask, assembled.shape)
    return np.where(m == 1, source_hi, assembled)


def refiner_channel_input(assembled: np.ndarray, noisy_hi: np.ndarray, mask=None) -> np.ndarray:
    """``concat(noisy | assembled | mask)`` along channels (mask only when given)."""
    assembled = np.asarray(assembled, dtype=np.float64)
    noisy_hi = np.asarray(noisy_hi, dtype=np.float64)
    if assembled.shape != noisy_hi.shape:
        raise ShapeError(f"assembled {assembled.shape} != noisy {noisy_hi.shape}")
    parts = [noisy_hi, assembled]
    if mask is not None:
        parts.append(_spatial_mask(mask, assembled.shape))
    return np.concatenate(parts, axis=-1)


def split_refiner_input(z: np.ndarray, channels: int):
    """Inverse of :func:`refiner_channel_input`: (noisy, assembled, mask or None)."""
    if z.shape[-1] not in (2 * channels, 2 * channels + 1):
        raise ShapeError(f"expected {2 * channels} or {2 * channels + 1} channels, got {z.shape[-1]}")
    mask = z[..., 2 * channels:] if z.shape[-1] == 2 * channels + 1 else None
    return z[..., :channels], z[..., channels:2 * channels], mask


@dataclass
class RefinerInput:
    low_res: np.ndarray
    keyframes: list
    assembled: np.ndarray
    noisy_hi: np.ndarray
    z: np.ndarray
    source_hi: np.ndarray | None = None
    spatial_mask: np.ndarray | None = None


def assemble_refiner_input(low_res, keyframes, target, noisy_hi, source_hi=None,
                           spatial_mask=None) -> RefinerInput:
    """Upsample, splice keyframes, then splice the preserved source (source wins on overlap)."""
    interp = upsample_latent(low_res, target)
    assembled = splice_keyframes(interp, keyframes)
    mask = None
    if source_hi is not None:
        if spatial_mask is None:
            raise ParameterError("inpainting needs a spatial mask alongside the source latent")
        mask = _spatial_mask(spatial_mask, assembled.shape)
        assembled = splice_inpaint(assembled, source_hi, mask)
    z = refiner_channel_input(assembled, noisy_hi, mask)
    return RefinerInput(np.asarray(low_res), list(keyframes), assembled, np.asarray(noisy_hi), z,
                        None if source_hi is None else np.asarray(source_hi), mask)


_DEFAULT = object()


class Refiner:
    """Refiner DiT: a copy of the base model run on the refiner channel layout.

    Without an inpaint mask the mask channel is filled with zeros so the
    2C + 1 input projection of the base model is reused unchanged.
    """

    def __init__(self, base: JointAVModel, sparse: SparseSpec | None = None):
        self.model = copy.deepcopy(base)
        self.sparse = sparse

    @property
    def cfg(self):
        return self.model.cfg

    def parameters(self):
        return self.model.parameters()

    def named_parameters(self):
        return self.model.named_parameters()

    def video_input(self, z) -> np.ndarray:
        C = self.cfg.latent_channels
        noisy, assembled, mask = split_refiner_input(np.asarray(z), C)
        if mask is None:
            mask = np.zeros(noisy.shape[:3] + (1,))
        return np.concatenate([noisy, assembled, mask], axis=-1)

    def __call__(self, z, z_a_t, t: float, text, references=None, sparse=_DEFAULT):
        sparse = self.sparse if sparse is _DEFAULT else sparse
        return self.model.forward_input(Tensor(self.video_input(z)), z_a_t, t, text, references, sparse)
