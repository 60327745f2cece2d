"""Parameter containers and small layers built on :mod:`mmdt.autodiff`."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError


class Module:
    """Walks attributes to find parameters; order follows attribute definition."""

    def named_parameters(self, prefix: str = "", _seen: set | None = None):
        # shared (tied) tensors are reported once, under their first name
        seen = set() if _seen is None else _seen
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad and id(val) not in seen:
                    seen.add(id(val))
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.", seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.", seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != parameter shape {p.shape}")
            np.copyto(p.data, arr)

    def randomize(self, rng: np.random.Generator, scale: float = 1.0) -> None:
        """Resample every parameter, including zero-initialized gates and projections.

        Matrices get N(0, scale**2 / fan_in); vectors N(0, (0.1 * scale)**2).
        """
        for p in self.parameters():
            std = scale / math.sqrt(p.shape[0]) if p.ndim == 2 else 0.1 * scale
            p.data[...] = rng.normal(0.0, std, p.shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, d_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


def timestep_features(t: float, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of ``1000 * t`` (cos half, then sin half)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = 1000.0 * float(t) * freqs
    feats = np.concatenate([np.cos(args), np.sin(args)])
    return np.pad(feats, (0, dim - 2 * half))


class TimestepEmbedder(Module):
    def __init__(self, feature_dim: int, model_dim: int, rng: np.random.Generator):
        self.feature_dim = feature_dim
        self.fc1 = Linear(feature_dim, model_dim, rng)
        self.fc2 = Linear(model_dim, model_dim, rng)

    def __call__(self, t: float) -> Tensor:
        h = self.fc1(Tensor(timestep_features(t, self.feature_dim)[None, :]))
        return self.fc2(ad.silu(h))
