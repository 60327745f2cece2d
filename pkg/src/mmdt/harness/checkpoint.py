"""Versioned little-endian tensor container used for checkpoints and latent archives.

Layout::

    b"MMDT" | u32 version | u32 n + n bytes UTF-8 header text | u32 record count
    per record: u32 n + name | u32 rank | rank x u64 extents | f64 LE payload
"""
from __future__ import annotations

import configparser
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from ..blocks import ModelConfig
from ..errors import FormatError
from ..flow import AdamState
from ..model import JointAVModel, build_model

MAGIC = b"MMDT"
VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def write_archive(path, header: str, records: dict, version: int = VERSION) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", version) + _pack_str(header))
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(_pack_str(name) + struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated archive at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def read_archive(path, expect_version: int = VERSION):
    """Returns ``(header_text, {name: ndarray})``; rejects foreign or mismatched files."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not an MMDT archive")
    version = r.u32()
    if version != expect_version:
        raise FormatError(f"{path}: archive version {version}, this build reads version {expect_version}")
    header = r.string()
    records = {}
    for _ in range(r.u32()):
        name = r.string()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        records[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return header, records


def _rng_to_text(state: dict) -> str:
    def plain(x):
        if isinstance(x, np.ndarray):
            return {"__u64__": [int(v) for v in x]}
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        return x
    return json.dumps(plain(state), sort_keys=True)


def _rng_from_text(text: str) -> dict:
    def restore(x):
        if isinstance(x, dict):
            if "__u64__" in x:
                return np.array(x["__u64__"], dtype=np.uint64)
            return {k: restore(v) for k, v in x.items()}
        return x
    return restore(json.loads(text))


@dataclass
class Checkpoint:
    version: int
    config_text: str
    model: JointAVModel
    step: int
    rng_state: dict | None
    adam: AdamState


def save_checkpoint(path, model: JointAVModel, step: int, adam: AdamState | None = None,
                    rng_state: dict | None = None, config_text: str | None = None) -> None:
    """``config_text`` is the run config; the model config is always written alongside it."""
    cp = configparser.ConfigParser(interpolation=None)
    if config_text:
        cp.read_string(config_text)
    cp["model"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in model.cfg.to_dict().items()}
    adam = adam or AdamState()
    cp["state"] = {"step": str(step), "rng": _rng_to_text(rng_state) if rng_state else "",
                   "adam_lr": repr(adam.lr), "adam_beta1": repr(adam.beta1),
                   "adam_beta2": repr(adam.beta2), "adam_eps": repr(adam.eps),
                   "adam_step": str(adam.step)}
    buf = io.StringIO()
    cp.write(buf)
    records = {f"param/{n}": p.data for n, p in model.named_parameters()}
    for n in adam.m:
        records[f"adam_m/{n}"] = adam.m[n]
        records[f"adam_v/{n}"] = adam.v[n]
    write_archive(path, buf.getvalue(), records)


def load_checkpoint(path) -> Checkpoint:
    header, records = read_archive(path)
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(header)
    if not cp.has_section("model") or not cp.has_section("state"):
        raise FormatError(f"{path}: checkpoint header lacks [model]/[state]")
    model = build_model(ModelConfig.from_dict(dict(cp["model"])))
    model.load_state_dict({k[len("param/"):]: v for k, v in records.items() if k.startswith("param/")})
    st = cp["state"]
    adam = AdamState(float(st["adam_lr"]), float(st["adam_beta1"]), float(st["adam_beta2"]),
                     float(st["adam_eps"]), int(st["adam_step"]))
    adam.m = {k[len("adam_m/"):]: v for k, v in records.items() if k.startswith("adam_m/")}
    adam.v = {k[len("adam_v/"):]: v for k, v in records.items() if k.startswith("adam_v/")}
    rng = _rng_from_text(st["rng"]) if st["rng"] else None
    step = int(st["step"])
    cp.remove_section("state")
    out = io.StringIO()
    cp.write(out)
    return Checkpoint(VERSION, out.getvalue(), model, step, rng, adam)


def save_latents(path, video: np.ndarray, audio: np.ndarray, metadata: dict) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    cp["metadata"] = {k: str(v) for k, v in metadata.items()}
    buf = io.StringIO()
    cp.write(buf)
    write_archive(path, buf.getvalue(), {"video_latent": video, "audio_latent": audio})


def load_latents(path):
    """``(video, audio, metadata dict)``."""
    header, records = read_archive(path)
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(header)
    meta = dict(cp["metadata"]) if cp.has_section("metadata") else {}
    try:
        return records["video_latent"], records["audio_latent"], meta
    except KeyError as exc:
        raise FormatError(f"{path}: latent archive missing record {exc}") from None
