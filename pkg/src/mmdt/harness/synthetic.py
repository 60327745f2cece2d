"""Procedural video/audio pairs with a shared event time, plus task conditioning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..conditioning import (TASK_KINDS, ConditionBundle, LatentCodec, ReferenceSet, TaskSpec,
                            build_task_mask)
from ..errors import ParameterError
from .text_stub import CaptionRecord, embed_prompt_stub

MAX_DIM = 64


@dataclass(frozen=True)
class SynthDims:
    frames: int = 2
    height: int = 4
    width: int = 4
    channels: int = 4
    audio_tokens: int = 8
    audio_channels: int = 4
    patch: int = 2


@dataclass
class SyntheticSample:
    seed: int
    index: int
    task: TaskSpec
    video_pixels: np.ndarray   # (T, H*p, W*p, 3)
    audio: np.ndarray          # (L, Ca) tone-envelope tokens
    caption: CaptionRecord
    event_frame: int
    z_v0: np.ndarray
    z_a0: np.ndarray
    cond: ConditionBundle


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.Philox(np.random.SeedSequence([seed, index, stream])))


def moving_pattern(rng: np.random.Generator, frames: int, height: int, width: int, event_frame: int):
    """Gaussian blob sliding left to right over a tinted background; brightness flash at the event."""
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    color = rng.uniform(0.2, 1.0, 3)
    bg = rng.uniform(0.0, 0.3, 3)
    y0 = rng.uniform(0, height - 1)
    sigma = max(1.0, 0.2 * min(height, width))
    out = np.empty((frames, height, width, 3))
    for t in range(frames):
        x0 = (width - 1) * t / max(1, frames - 1)
        blob = np.exp(-((yy - y0) ** 2 + (xx - x0) ** 2) / (2 * sigma ** 2))
        gain = 2.0 if t == event_frame else 1.0
        out[t] = bg + gain * blob[..., None] * color
    return out


def tone_envelope(rng: np.random.Generator, tokens: int, channels: int, peak: int) -> np.ndarray:
    j = np.arange(tokens)
    width = max(1.0, tokens / 8)
    env = np.exp(-0.5 * ((j - peak) / width) ** 2)
    freqs = rng.uniform(0.5, 3.0, channels)
    phase = rng.uniform(0, 2 * np.pi, channels)
    tone = 1.0 + 0.5 * np.cos(2 * np.pi * freqs[None, :] * j[:, None] / tokens + phase[None, :])
    # unit mean per token so loudness follows the envelope alone
    return env[:, None] * tone / tone.mean(axis=1, keepdims=True)


def audio_peak_index(event_frame: int, frames: int, tokens: int) -> int:
    """Audio token aligned with a video frame under the frames/tokens time ratio."""
    return min(tokens - 1, int(round(event_frame * tokens / frames)))


def _task_for(kind: str, dims: SynthDims, rng: np.random.Generator) -> TaskSpec:
    T, H, W, C = dims.frames, dims.height, dims.width, dims.channels
    if kind == "extend":
        return TaskSpec(kind, T, H, W, C, k=max(1, T // 2))
    if kind == "edit":
        m = np.ones((T, H, W, 1))
        h0, w0 = rng.integers(0, H), rng.integers(0, W)
        m[:, h0:h0 + max(1, H // 2), w0:w0 + max(1, W // 2)] = 0.0
        return TaskSpec(kind, T, H, W, C, edit_mask=m)
    return TaskSpec(kind, T, H, W, C)


def make_sample(seed: int, index: int, kind: str, dims: SynthDims, model_dim: int,
                codec: LatentCodec | None = None, with_reference: bool = False) -> SyntheticSample:
    rng = sample_rng(seed, index)
    codec = codec or LatentCodec(dims.channels, dims.patch, seed=seed)
    event = int(rng.integers(0, dims.frames))
    pixels = moving_pattern(rng, dims.frames, dims.height * dims.patch, dims.width * dims.patch, event)
    peak = audio_peak_index(event, dims.frames, dims.audio_tokens)
    audio = tone_envelope(rng, dims.audio_tokens, dims.audio_channels, peak)
    caption = CaptionRecord(
        description=f"a glowing blob drifts right sample {index}",
        text="", sfx=f"chime at frame {event}", bgm="soft hum")
    task = _task_for(kind, dims, rng)
    z_v0 = codec.encode(pixels)
    mask = build_task_mask(task)
    refs, slots = None, []
    if with_reference:
        refs = ReferenceSet([z_v0[:1, : max(1, dims.height // 2), : max(1, dims.width // 2)]], ["image"])
        slots = ["@image_1"]
        caption.description += " like @image_1"
    text = embed_prompt_stub(caption, model_dim, ref_slots=slots)
    cond = ConditionBundle(text, z_v0, mask, dims.audio_tokens, codec.black_latent(), refs)
    return SyntheticSample(seed, index, task, pixels, audio, caption, event, z_v0, audio, cond)


def gen_synthetic_batch(seed: int, task: str, count: int, dims: SynthDims = SynthDims(),
                        model_dim: int = 64, with_reference: bool = False) -> list[SyntheticSample]:
    """``count`` samples; ``task='mixed'`` cycles through all task kinds by sample index."""
    if task != "mixed" and task not in TASK_KINDS:
        raise ParameterError(f"unknown task {task!r}")
    if max(dims.frames, dims.height, dims.width, dims.audio_tokens) > MAX_DIM:
        raise ParameterError(f"synthetic dims exceed desk limit {MAX_DIM}: {dims}")
    if dims.frames < 2 and task in ("mixed", "i2v", "extend", "startend"):
        raise ParameterError("conditioned tasks need at least two frames")
    codec = LatentCodec(dims.channels, dims.patch, seed=seed)
    kinds = [TASK_KINDS[i % len(TASK_KINDS)] if task == "mixed" else task for i in range(count)]
    return [make_sample(seed, i, kind, dims, model_dim, codec, with_reference)
            for i, kind in enumerate(kinds)]
