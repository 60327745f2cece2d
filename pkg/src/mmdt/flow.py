"""Flow-matching objective, Adam training step, and Euler sampler.

Noisy latents interpolate linearly between noise (t = 0) and data (t = 1):
``z_t = t * z0 + (1 - t) * eps``; the regression target is the constant
velocity ``z0 - eps``. Video and audio share one ``t`` per pair.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .conditioning import ConditionBundle
from .errors import (DegenerateTaskError, DomainError, NumericalError, ParameterError,
                     SamplingError, ShapeError, TrainingError)
from .nn import Module

__all__ = ["FlowSample", "ConditionBundle", "make_flow_sample", "joint_loss", "joint_loss_terms",
           "AdamState", "train_step", "euler_sample"]


@dataclass
class FlowSample:
    t: float
    z_v0: np.ndarray
    z_a0: np.ndarray
    eps_v: np.ndarray
    eps_a: np.ndarray
    z_v_t: np.ndarray
    z_a_t: np.ndarray
    target_v: np.ndarray
    target_a: np.ndarray


def _interpolate(z0: np.ndarray, eps: np.ndarray, t: float) -> np.ndarray:
    return t * z0 + (1.0 - t) * eps


def make_flow_sample(z_v0, z_a0, t: float, rng: np.random.Generator,
                     eps_v: np.ndarray | None = None, eps_a: np.ndarray | None = None) -> FlowSample:
    """Draw unit Gaussian noise (unless given) and build noisy latents and targets."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    z_v0 = np.asarray(z_v0, dtype=np.float64)
    z_a0 = np.asarray(z_a0, dtype=np.float64)
    if eps_v is None:
        eps_v = rng.standard_normal(z_v0.shape)
    if eps_a is None:
        eps_a = rng.standard_normal(z_a0.shape)
    t = float(t)
    return FlowSample(t, z_v0, z_a0, eps_v, eps_a,
                      _interpolate(z_v0, eps_v, t), _interpolate(z_a0, eps_a, t),
                      z_v0 - eps_v, z_a0 - eps_a)


def _weighted_mse(pred, target: np.ndarray, weight: np.ndarray, branch: str) -> Tensor:
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    if pred.shape != target.shape:
        raise ShapeError(f"{branch} prediction {pred.shape} != target {target.shape}")
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), target.shape)
    total = float(w.sum())
    if total <= 0:
        raise DegenerateTaskError(f"{branch} loss weights are all zero")
    diff = pred - target
    return ad.tsum(diff * diff * w) * (1.0 / total)


def joint_loss_terms(pred_v, pred_a, sample: FlowSample, loss_weights_v=None, loss_weights_a=None):
    """(total, video term, audio term); each term is a weighted per-element mean."""
    wv = np.ones(sample.target_v.shape[:-1] + (1,)) if loss_weights_v is None else loss_weights_v
    wa = np.ones(sample.target_a.shape[:-1] + (1,)) if loss_weights_a is None else loss_weights_a
    lv = _weighted_mse(pred_v, sample.target_v, wv, "video")
    la = _weighted_mse(pred_a, sample.target_a, wa, "audio")
    return lv + la, lv, la


def joint_loss(pred_v, pred_a, sample: FlowSample, loss_weights_v=None, loss_weights_a=None) -> Tensor:
    return joint_loss_terms(pred_v, pred_a, sample, loss_weights_v, loss_weights_a)[0]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def apply(self, named_params) -> None:
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name, p in named_params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class StepLoss:
    total: float
    video: float
    audio: float


def batch_loss(model: Callable, batch: Sequence):
    """Mean joint loss over ``[(FlowSample, ConditionBundle), ...]``; loss weight is ``1 - M``."""
    terms = []
    for sample, cond in batch:
        pred_v, pred_a = model(Tensor(sample.z_v_t), Tensor(sample.z_a_t), sample.t, cond)
        terms.append(joint_loss_terms(pred_v, pred_a, sample, 1.0 - cond.mask))
    scale = 1.0 / len(terms)
    total = ad.tsum(ad.concat([tt[0].reshape(1) for tt in terms])) * scale
    lv = sum(tt[1].item() for tt in terms) * scale
    la = sum(tt[2].item() for tt in terms) * scale
    return total, lv, la


def train_step(model: Module, batch: Sequence, state: AdamState):
    """One Adam update on every parameter; returns ``(state, StepLoss)`` with the pre-update loss."""
    if not batch:
        raise ParameterError("empty training batch")
    step = state.step
    model.zero_grad()
    try:
        with Tape() as tape:
            total, lv, la = batch_loss(model, batch)
        loss = total.item()
        if not np.isfinite(loss):
            raise NumericalError("loss is not finite")
        tape.backward(total)
    except NumericalError as exc:
        raise TrainingError(step, str(exc)) from exc
    state.apply(model.named_parameters())
    return state, StepLoss(loss, lv, la)


def euler_sample(model: Callable, cond: ConditionBundle, steps: int, rng: np.random.Generator,
                 audio_channels: int | None = None, guidance_scale: float = 1.0,
                 uncond: ConditionBundle | None = None, eps_v=None, eps_a=None):
    """Integrate ``dz/dt = v(t, z, c)`` from noise at t = 0 to data at t = 1 on a uniform grid.

    Positions with ``M = 1`` are overwritten from the condition frames after
    every update, so they come out equal to the condition latents.
    ``guidance_scale != 1`` mixes in an unconditional prediction from ``uncond``.
    """
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    if guidance_scale != 1.0 and uncond is None:
        raise ParameterError("guidance needs an unconditional bundle")
    if audio_channels is None:
        audio_channels = getattr(getattr(model, "cfg", None), "audio_channels", cond.video_shape[-1])
    z_v = rng.standard_normal(cond.video_shape) if eps_v is None else np.array(eps_v, dtype=np.float64)
    z_a = rng.standard_normal((cond.audio_len, audio_channels)) if eps_a is None else np.array(eps_a, dtype=np.float64)
    keep = cond.mask == 1
    z_v = np.where(keep, cond.cond_frames, z_v)
    dt = 1.0 / steps
    for i in range(steps):
        t = i * dt
        v_v, v_a = _velocity(model, z_v, z_a, t, cond)
        if guidance_scale != 1.0:
            u_v, u_a = _velocity(model, z_v, z_a, t, uncond)
            v_v = u_v + guidance_scale * (v_v - u_v)
            v_a = u_a + guidance_scale * (v_a - u_a)
        if not (np.all(np.isfinite(v_v)) and np.all(np.isfinite(v_a))):
            raise SamplingError(f"non-finite velocity at step {i} (t={t})")
        z_v = np.where(keep, cond.cond_frames, z_v + dt * v_v)
        z_a = z_a + dt * v_a
    return z_v, z_a


def _velocity(model, z_v, z_a, t, cond):
    try:
        v_v, v_a = model(z_v, z_a, t, cond)
    except NumericalError as exc:
        raise SamplingError(str(exc)) from exc
    as_np = lambda x: x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return as_np(v_v), as_np(v_a)
