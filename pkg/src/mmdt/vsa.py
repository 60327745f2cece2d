"""Two-stage block-sparse video attention.

Tokens of a T x H x W grid are tiled into spatio-temporal cubes. A coarse
stage mean-pools queries and keys per cube and ranks key cubes for every
query cube; the fine stage runs exact attention from each query cube only
over its selected key cubes. One selection is shared by all heads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ParameterError, ShapeError, UsageError
from .rope import RopePlan


@dataclass
class CubeMap:
    grid: tuple[int, int, int]
    cube_dims: tuple[int, int, int]
    counts: tuple[int, int, int]      # cubes along t, h, w
    cube_of_token: np.ndarray         # (n_tokens,)
    members: list                     # token indices per cube, ascending

    @property
    def n_cubes(self) -> int:
        return len(self.members)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members])


def partition_cubes(grid, cube_dims) -> CubeMap:
    """Tile a row-major (t, h, w) token grid into cubes; edge cubes may be smaller.

    Cube dims larger than the grid are clipped to it.
    """
    grid = tuple(int(g) for g in grid)
    if len(grid) != 3 or min(grid) < 1:
        raise ParameterError(f"grid must be three positive extents, got {grid}")
    if len(cube_dims) != 3 or min(cube_dims) < 1:
        raise ParameterError(f"cube dims must be three positive extents, got {tuple(cube_dims)}")
    cube = tuple(min(int(c), g) for c, g in zip(cube_dims, grid))
    counts = tuple(-(-g // c) for g, c in zip(grid, cube))
    t, h, w = np.meshgrid(*(np.arange(g) for g in grid), indexing="ij")
    cid = ((t // cube[0]) * counts[1] + h // cube[1]) * counts[2] + w // cube[2]
    cid = cid.ravel()
    order = np.argsort(cid, kind="stable")
    bounds = np.searchsorted(cid[order], np.arange(np.prod(counts) + 1))
    members = [order[bounds[i]:bounds[i + 1]] for i in range(int(np.prod(counts)))]
    return CubeMap(grid, cube, counts, cid, members)


@dataclass
class FlopLedger:
    coarse: int
    fine: int
    dense: int

    @property
    def reduction(self) -> float:
        return self.dense / (self.coarse + self.fine)


@dataclass
class SparsePlan:
    cubes: CubeMap
    K: int
    selection: list | None = None     # per query cube: ascending key-cube indices
    scores: np.ndarray | None = None  # (n_cubes, n_cubes) pooled scores, summed over heads
    ledger: FlopLedger | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 1 <= self.K <= self.cubes.n_cubes:
            raise ParameterError(f"K must lie in [1, {self.cubes.n_cubes}], got {self.K}")

    @property
    def grid(self):
        return self.cubes.grid

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.cubes.grid))


def make_plan(grid, cube_dims, K: int) -> SparsePlan:
    return SparsePlan(partition_cubes(grid, cube_dims), K)


def _check_qk(x: np.ndarray, n: int, what: str):
    if x.ndim != 3 or x.shape[0] != n:
        raise ShapeError(f"{what} must be [{n} tokens, heads, head_dim], got {x.shape}")


def pool_cubes(x: np.ndarray, cubes: CubeMap) -> np.ndarray:
    """Mean over the tokens of each cube: (n_cubes, heads, head_dim)."""
    return np.stack([x[m].mean(axis=0) for m in cubes.members])


def coarse_select(q: np.ndarray, k: np.ndarray, plan: SparsePlan) -> list:
    """Rank key cubes per query cube by pooled scores and keep the top K.

    The query cube itself is always kept; ties go to the lower cube index.
    Fills ``plan.scores`` and ``plan.selection``.
    """
    q, k = np.asarray(q), np.asarray(k)
    _check_qk(q, plan.n_tokens, "q")
    _check_qk(k, plan.n_tokens, "k")
    pq, pk = pool_cubes(q, plan.cubes), pool_cubes(k, plan.cubes)
    scores = np.einsum("ahd,bhd->ab", pq, pk) / math.sqrt(q.shape[-1])
    n = plan.cubes.n_cubes
    idx = np.arange(n)
    selection = []
    for a in range(n):
        ranked = np.lexsort((idx, -scores[a]))
        others = ranked[ranked != a][:plan.K - 1]
        selection.append(np.sort(np.concatenate([[a], others])).astype(np.int64))
    plan.scores, plan.selection = scores, selection
    return selection


def full_selection(plan: SparsePlan) -> list:
    n = plan.cubes.n_cubes
    plan.selection = [np.arange(n) for _ in range(n)]
    return plan.selection


def selection_mask(plan: SparsePlan) -> np.ndarray:
    """Boolean (n_tokens, n_tokens) mask of admissible query/key pairs."""
    if plan.selection is None:
        raise UsageError("plan has no selection; run coarse_select first")
    sel = np.zeros((plan.cubes.n_cubes,) * 2, dtype=bool)
    for a, keys in enumerate(plan.selection):
        sel[a, keys] = True
    cid = plan.cubes.cube_of_token
    return sel[cid[:, None], cid[None, :]]


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _rotate(x: np.ndarray, plan: RopePlan) -> np.ndarray:
    ang = plan.angles()[:, None, :]
    c, s = np.cos(ang), np.sin(ang)
    out = np.empty_like(x)
    out[..., 0::2] = x[..., 0::2] * c - x[..., 1::2] * s
    out[..., 1::2] = x[..., 0::2] * s + x[..., 1::2] * c
    return out


def _attend_heads(q, k, v, scale, mask=None):
    """Head-major batched attention on [tokens, heads, dim] blocks; returns [n_q, heads, dim]."""
    qh, kh, vh = q.transpose(1, 0, 2), k.transpose(1, 2, 0), v.transpose(1, 0, 2)
    s = np.matmul(qh, kh) * scale
    if mask is not None:
        s = np.where(mask[None], s, -np.inf)
    return np.matmul(_softmax_rows(s), vh).transpose(1, 0, 2)


def dense_attention(q, k, v, mask: np.ndarray | None = None, chunk: int = 512) -> np.ndarray:
    """Reference attention on [tokens, heads, head_dim]; masked entries get weight 0."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    out = np.empty(q.shape[:2] + v.shape[2:])
    scale = 1.0 / math.sqrt(q.shape[-1])
    for start in range(0, q.shape[0], chunk):
        rows = slice(start, start + chunk)
        out[rows] = _attend_heads(q[rows], k, v, scale, None if mask is None else mask[rows])
    return out


def sparse_attention(q, k, v, selection_or_plan, rope_plan: RopePlan | None = None) -> np.ndarray:
    """Fine stage: each query cube attends only over its selected key cubes.

    ``rope_plan``, when given, rotates q and k first (as the dense path would).
    """
    plan = selection_or_plan
    if plan.selection is None:
        raise UsageError("plan has no selection; run coarse_select first")
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    for name, x in (("q", q), ("k", k), ("v", v)):
        _check_qk(x, plan.n_tokens, name)
    if rope_plan is not None:
        q, k = _rotate(q, rope_plan), _rotate(k, rope_plan)
    members = plan.cubes.members
    scale = 1.0 / math.sqrt(q.shape[-1])
    out = np.empty_like(q)
    for a, keys in enumerate(plan.selection):
        if len(keys) == 0:
            raise UsageError(f"query cube {a} has an empty selection")
        qi = members[a]
        kj = np.concatenate([members[b] for b in keys])
        out[qi] = _attend_heads(q[qi], k[kj], v[kj], scale)
    return out


def flop_report(plan: SparsePlan, head_count: int, head_dim: int) -> FlopLedger:
    """Multiply-add FLOP model of one attention call (2 FLOPs per MAC).

    dense  = 2 * n^2 * d * heads * 2          (scores + weighted sum)
    fine   = 4 * d * heads * sum over selected (query cube, key cube) of |a| * |b|
    coarse = 2 * n * d * heads                (pooling q and k)
           + 2 * n_cubes^2 * d * heads        (pooled scores)
    """
    if plan.selection is None:
        raise UsageError("plan has no selection; run coarse_select first")
    n, c, dh = plan.n_tokens, plan.cubes.n_cubes, head_dim * head_count
    sizes = plan.cubes.sizes
    pairs = sum(int(sizes[a]) * int(sizes[keys].sum()) for a, keys in enumerate(plan.selection))
    ledger = FlopLedger(coarse=2 * n * dh + 2 * c * c * dh, fine=4 * dh * pairs, dense=4 * n * n * dh)
    plan.ledger = ledger
    return ledger


def grid_mask_fn(grid, cube_dims, K: int, offset: int):
    """Mask callback for joint attention whose grid tokens start at ``offset``.

    Non-grid tokens (references, text) stay dense in both directions; grid
    queries see grid keys only within their selected cubes.
    """
    n_grid = int(np.prod(grid))

    def mask_fn(q: np.ndarray, k: np.ndarray) -> np.ndarray:
        plan = make_plan(grid, cube_dims, K)
        sl = slice(offset, offset + n_grid)
        coarse_select(q[sl], k[sl], plan)
        mask = np.ones((q.shape[0], k.shape[0]), dtype=bool)
        mask[sl, sl] = selection_mask(plan)
        return mask

    return mask_fn


DEFAULT_SWEEP = (
    ((8, 8, 8), (4, 4, 4)),
    ((8, 8, 8), (2, 2, 2)),
    ((16, 16, 16), (4, 4, 4)),
)


def bench_rows(sweep: Iterable = DEFAULT_SWEEP, heads: int = 2, head_dim: int = 16,
               seed: int = 0, k_fractions=(None, 0.25, 1 / 3, 0.5, 1.0)) -> list[dict]:
    """FLOP ledger and max error against dense attention for each (grid, cube, K).

    ``None`` in ``k_fractions`` means K = 1 (self only).
    """
    rng = np.random.default_rng(np.random.Philox(seed))
    rows = []
    for grid, cube in sweep:
        cubes = partition_cubes(grid, cube)
        n = int(np.prod(grid))
        q, k, v = (rng.standard_normal((n, heads, head_dim)) for _ in range(3))
        dense = dense_attention(q, k, v)
        ks = sorted({1 if f is None else max(1, round(f * cubes.n_cubes)) for f in k_fractions})
        for K in ks:
            plan = SparsePlan(cubes, K)
            coarse_select(q, k, plan)
            out = sparse_attention(q, k, v, plan)
            led = flop_report(plan, heads, head_dim)
            rows.append({
                "grid": "x".join(map(str, grid)), "cube": "x".join(map(str, cubes.cube_dims)),
                "K": K, "coarse_flops": led.coarse, "fine_flops": led.fine,
                "dense_flops": led.dense, "reduction": led.reduction,
                "max_abs_err_vs_dense": float(np.abs(out - dense).max()),
            })
    return rows
