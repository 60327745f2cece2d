"""Invariant suite behind ``mmdt verify``: one deterministic check per property.

Every check seeds its own Philox stream, so two runs print identical
reports. ``faults`` names debug mutations applied before checking; the only
one defined is ``text-xattn-sign``, which flips the residual sign of text
cross-attention.
"""
from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tape, Tensor, grad_check
from ..blocks import (CrossAttention, DualStreamBlock, ModelConfig, SingleStreamBlock, TokenSequence,
                      TwinBackbone, attention, branch_forward)
from ..conditioning import (TASK_KINDS, ChannelInput, ConditionBundle, TaskSpec, audio_input_tokens,
                            build_loss_mask, build_task_mask, frame_flags, grid_rope, prepend_references)
from ..errors import ParameterError
from ..flow import euler_sample, joint_loss, make_flow_sample
from ..model import SparseSpec, build_model
from ..refiner import Refiner, assemble_refiner_input, splice_inpaint, splice_keyframes, upsample_latent
from ..rope import RopePlan, apply_rope, audio_scale_factor, grid_indices, sequence_indices
from ..vsa import coarse_select, dense_attention, flop_report, make_plan, sparse_attention
from . import oracles as O

FAULTS = ("text-xattn-sign",)
CHECKS: list[tuple[str, Callable]] = []


def check(name: str):
    def register(fn):
        CHECKS.append((name, fn))
        return fn
    return register


def rng_for(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.Philox(seed))


def small_cfg(**kw) -> ModelConfig:
    base = dict(m_dual=1, n_single=1, model_dim=16, head_count=2, mlp_ratio=2, timestep_embed_dim=8,
                latent_channels=2, audio_channels=2)
    base.update(kw)
    return ModelConfig(**base)


def random_tokens(rng, n, d, modality="video", plan=None) -> TokenSequence:
    return TokenSequence(Tensor(rng.standard_normal((n, d))), modality, plan)


# ---------------------------------------------------------------------------
# tensor-autodiff
# ---------------------------------------------------------------------------

def primitive_probes(rng: np.random.Generator) -> dict:
    """name -> (input shape, scalar function) exercising each registered primitive.

    All random weights are drawn here, so every evaluation of a probe sees
    the same function.
    """
    shapes = {"b": (3, 4), "o": (3, 4), "m45": (4, 5), "o35": (3, 5), "o43": (4, 3), "o26": (2, 6),
              "o38": (3, 8), "o33": (3, 3), "o4": (4,), "o3": (3,), "g4": (4,), "b4": (4,)}
    w = {k: rng.standard_normal(s) for k, s in shapes.items()}
    ang = rng.uniform(0, 2 * np.pi, (3, 2))
    mask = np.array([[1, 1, 0, 1]] * 3, dtype=bool)
    o = w["o"]
    return {
        "add": ((3, 4), lambda x: ad.tsum(ad.add(x, w["b"]) * o)),
        "sub": ((3, 4), lambda x: ad.tsum(ad.sub(w["b"], x) * o)),
        "mul": ((3, 4), lambda x: ad.tsum(ad.mul(x, x) * o)),
        "neg": ((3, 4), lambda x: ad.tsum(ad.neg(x) * o)),
        "matmul": ((3, 4), lambda x: ad.tsum(ad.matmul(x, w["m45"]) * w["o35"])),
        "transpose": ((3, 4), lambda x: ad.tsum(ad.transpose(x) * w["o43"])),
        "reshape": ((3, 4), lambda x: ad.tsum(ad.reshape(x, (2, 6)) * w["o26"])),
        "concat": ((3, 4), lambda x: ad.tsum(ad.concat([x, x * 2.0], axis=1) * w["o38"])),
        "split": ((3, 4), lambda x: ad.tsum(ad.split(x, [1, 3], axis=1)[1] * w["o33"])),
        "index": ((3, 4), lambda x: ad.tsum(ad.index(x, np.array([0, 2, 0])) * o)),
        "sum": ((3, 4), lambda x: ad.tsum(ad.tsum(x, axis=0) * w["o4"])),
        "mean": ((3, 4), lambda x: ad.tsum(ad.mean(x, axis=1) * w["o3"])),
        "softmax": ((3, 4), lambda x: ad.tsum(ad.softmax_lastdim(x, mask) * o)),
        "layer_norm": ((3, 4), lambda x: ad.tsum(ad.layer_norm(x, w["g4"], w["b4"]) * o)),
        "gelu": ((3, 4), lambda x: ad.tsum(ad.gelu(x) * o)),
        "silu": ((3, 4), lambda x: ad.tsum(ad.silu(x) * o)),
        "rotate_pairs": ((3, 4), lambda x: ad.tsum(ad.rotate_pairs(x, np.cos(ang), np.sin(ang)) * o)),
    }


def primitive_grad_error(name: str, seed: int) -> float:
    rng = rng_for(seed)
    shape, fn = primitive_probes(rng)[name]
    return grad_check(fn, Tensor(rng.standard_normal(shape)))


@check("autodiff.primitive_grad_check")
def _(faults):
    missing = set(ad.PRIMITIVES) - set(primitive_probes(rng_for(0)))
    worst = max(primitive_grad_error(n, s) for n in ad.PRIMITIVES for s in range(20))
    return worst < 1e-4 and not missing, f"max rel err {worst:.2e}, unprobed {sorted(missing)}"


@check("autodiff.matmul_vs_loops")
def _(faults):
    rng = rng_for(1)
    worst = 0.0
    for n, k, m in [(1, 1, 1), (2, 3, 4), (8, 8, 8), (5, 1, 7), (8, 3, 1)]:
        a, b = rng.standard_normal((n, k)), rng.standard_normal((k, m))
        worst = max(worst, np.abs(ad.matmul(Tensor(a), Tensor(b)).data - O.matmul_loops(a, b)).max())
    return worst <= 1e-12, f"max abs diff {worst:.1e}"


def _tape_run(seed: int):
    m = build_model(small_cfg(), seed=seed)
    m.randomize(rng_for(seed + 1), 0.5)
    rng = rng_for(seed + 2)
    zv, za = rng.standard_normal((2, 2, 2, 2)), rng.standard_normal((4, 2))
    cond = ConditionBundle(rng.standard_normal((3, 16)), np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2, 1)), 4)
    with Tape() as tape:
        pv, pa = m(Tensor(zv), Tensor(za), 0.4, cond)
        loss = ad.tsum(pv * pv) + ad.tsum(pa * pa)
    tape.backward(loss)
    return [n.output.data for n in tape.nodes] + [p.grad for p in m.parameters()]


@check("autodiff.tape_replay_determinism")
def _(faults):
    a, b = _tape_run(5), _tape_run(5)
    same = len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
    return same, f"{len(a)} arrays compared bitwise"


# ---------------------------------------------------------------------------
# rope3d
# ---------------------------------------------------------------------------

@check("rope.norm_preservation")
def _(faults):
    rng = rng_for(2)
    plan = RopePlan(16, grid_indices(3, 4, 5))
    x = rng.standard_normal((60, 2, 16))
    y = apply_rope(x, plan).data
    err = np.abs(np.linalg.norm(y, axis=-1) - np.linalg.norm(x, axis=-1)).max()
    ref = np.abs(y - O.rope_complex(x, O.plan_angles(plan))).max()
    return err <= 1e-12 and ref <= 1e-12, f"norm err {err:.1e}, complex-route diff {ref:.1e}"


@check("rope.relative_position")
def _(faults):
    rng = rng_for(3)
    q, k = rng.standard_normal((1, 1, 16)), rng.standard_normal((1, 1, 16))
    worst = 0.0
    for axis in range(3):
        for i in range(5):
            for j in range(5):
                def dot(ii, jj):
                    pi, pj = np.zeros((1, 3), int), np.zeros((1, 3), int)
                    pi[0, axis], pj[0, axis] = ii, jj
                    return float((apply_rope(q, RopePlan(16, pi)).data * apply_rope(k, RopePlan(16, pj)).data).sum())
                base = dot(i, j)
                for s in (-3, 1, 7):
                    worst = max(worst, abs(dot(i + s, j + s) - base))
    return worst <= 1e-12, f"max shift drift {worst:.1e} over 3 axes x 5x5 grid"


@check("rope.audio_scale_alignment")
def _(faults):
    s = audio_scale_factor(21, 218)
    video = RopePlan(16, sequence_indices([0, 1, 21, 42]))
    audio = RopePlan(16, sequence_indices([0, 218 // 21, 218, 436]), temporal_scale=s)
    err = np.abs(video.angles()[[0, 2, 3]] - audio.angles()[[0, 2, 3]]).max()
    return abs(s - 0.09633) <= 5e-5 and err <= 1e-10, f"scale {s:.6f}, angle err {err:.1e}"


@check("rope.offset_disambiguation")
def _(faults):
    s = audio_scale_factor(21, 218)
    clashes = 0
    for T in range(1, 33):
        gen_v = np.arange(T, dtype=float)
        gen_a = np.arange(int(np.ceil(T / s))) * s
        for n in range(1, 9):
            cond = np.arange(-n, 0, dtype=float)
            for c_pos in (cond, cond * s):
                for g in (gen_v, gen_a):
                    clashes += int(np.isclose(c_pos[:, None], g[None, :], atol=1e-12).any())
    return clashes == 0, f"{clashes} clashing (T, N_cond) configurations"


# ---------------------------------------------------------------------------
# mmdit-blocks
# ---------------------------------------------------------------------------

@check("blocks.identity_at_init")
def _(faults):
    cfg = small_cfg()
    bb = TwinBackbone(cfg, rng_for(4))
    rng = rng_for(5)
    v, a, txt = random_tokens(rng, 8, 16), random_tokens(rng, 4, 16, "audio"), random_tokens(rng, 3, 16, "text")
    c = Tensor(rng.standard_normal((1, 16)))
    ov, oa = branch_forward(bb, v, a, txt, c)
    same = np.array_equal(ov.tokens.data, v.tokens.data) and np.array_equal(oa.tokens.data, a.tokens.data)
    return same, "bitwise" if same else "residual path altered"


@check("blocks.dual_single_equivalence")
def _(faults):
    cfg = small_cfg()
    worst = 0.0
    for seed in range(10):
        dual = DualStreamBlock(cfg, rng_for(seed))
        dual.randomize(rng_for(100 + seed), 0.5)
        dual.tie_streams()
        single = SingleStreamBlock(cfg, rng_for(seed))
        single.shared = dual.x
        rng = rng_for(200 + seed)
        x, txt = random_tokens(rng, 6, 16), random_tokens(rng, 3, 16, "text")
        c = Tensor(rng.standard_normal((1, 16)))
        ox, ot = dual(x, txt, c)
        oh = single(TokenSequence(ad.concat([x.tokens, txt.tokens]), "mixed",
                                  x.plan(cfg.head_dim).concat(txt.plan(cfg.head_dim))), c)
        worst = max(worst, np.abs(np.concatenate([ox.tokens.data, ot.tokens.data]) - oh.tokens.data).max())
    return worst <= 1e-10, f"max diff {worst:.1e} over 10 seeds"


@check("blocks.attention_row_stochastic")
def _(faults):
    rng = rng_for(6)
    q, k, v = (Tensor(rng.standard_normal((7, 2, 8)) * 3) for _ in range(3))
    _, p = attention(q, k, v, return_probs=True)
    err = np.abs(p.data.sum(-1) - 1).max()
    return err <= 1e-12, f"max |row sum - 1| {err:.1e}"


@check("blocks.stack_grad_check")
def _(faults):
    cfg = small_cfg()
    bb = TwinBackbone(cfg, rng_for(7))
    bb.randomize(rng_for(8), 0.5)
    rng = rng_for(9)
    v0 = rng.standard_normal((4, 16))
    a, txt = random_tokens(rng, 3, 16, "audio"), random_tokens(rng, 2, 16, "text")
    c = Tensor(rng.standard_normal((1, 16)))
    w = rng.standard_normal((4, 16))

    x0 = Tensor(v0)

    def f(x):
        ov, oa = branch_forward(bb, TokenSequence(x, "video"), a, txt, c)
        return ad.tsum(ov.tokens * w) + ad.tsum(oa.tokens * oa.tokens)

    err = grad_check(f, x0)
    p = bb.video_layers[1].block.shared.fc1.weight
    err = max(err, grad_check(lambda _: f(x0), p, coords=range(0, p.size, 37)))
    return err < 1e-4, f"max rel err {err:.2e}"


@check("blocks.text_cross_attention_residual")
def _(faults):
    cfg = small_cfg()
    ca = CrossAttention(cfg, rng_for(10))
    ca.randomize(rng_for(11), 0.5)
    if "text-xattn-sign" in faults:
        ca.residual_sign = -1.0
    rng = rng_for(12)
    x, txt = random_tokens(rng, 5, 16), random_tokens(rng, 3, 16, "text")
    out = ca(x, txt).tokens.data
    ref = O.cross_attention(ca, x.tokens.data, txt.tokens.data)
    err = np.abs(out - ref).max()
    return err <= 1e-12, f"max diff vs x + CA(x, text) oracle {err:.1e}"


@check("blocks.cross_modal_reach")
def _(faults):
    cfg = small_cfg()
    bb = TwinBackbone(cfg, rng_for(13))
    bb.randomize(rng_for(14), 0.5)
    for av in bb.av_layers:
        for lin in (av.audio_from_video.out, av.video_from_audio.out):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0
    rng = rng_for(15)
    v, txt = random_tokens(rng, 4, 16), random_tokens(rng, 2, 16, "text")
    c = Tensor(rng.standard_normal((1, 16)))
    outs = [branch_forward(bb, v, random_tokens(rng, 3, 16, "audio"), txt, c)[0].tokens.data
            for _ in range(2)]
    return np.array_equal(*outs), "video output invariant to audio input"


# ---------------------------------------------------------------------------
# task-conditioning
# ---------------------------------------------------------------------------

def _specs():
    rng = rng_for(16)
    for T in (2, 3, 4, 8):
        for kind in TASK_KINDS:
            if kind == "extend":
                for k in range(1, T):
                    yield TaskSpec(kind, T, 2, 3, 2, k=k)
            elif kind == "edit":
                yield TaskSpec(kind, T, 2, 3, 2, edit_mask=rng.integers(0, 2, (T, 2, 3, 1)).astype(float))
            else:
                yield TaskSpec(kind, T, 2, 3, 2)


@check("conditioning.mask_loss_complement")
def _(faults):
    bad = sum(not np.array_equal(build_task_mask(s) + build_loss_mask(s), np.ones((s.frames, 2, 3, 1)))
              for s in _specs())
    return bad == 0, f"{bad} specs violate M + (1 - M) = 1"


@check("conditioning.task_matrix")
def _(faults):
    bad = 0
    for s in _specs():
        m = build_task_mask(s)
        if s.kind == "edit":
            bad += not np.array_equal(m, s.edit_mask)
        else:
            bad += frame_flags(m) != O.task_flags_table(s.kind, s.frames, s.k)
    return bad == 0, f"{bad} mismatching specs"


@check("conditioning.reference_noop")
def _(faults):
    z = np.arange(2 * 3 * 3 * 2, dtype=float).reshape(2, 3, 3, 2)
    out, plan = prepend_references([], z, grid_rope(8))
    same = out is z and np.array_equal(plan.indices, grid_indices(2, 3, 3))
    return same, "tokens and indices unchanged"


@check("conditioning.audio_branch_purity")
def _(faults):
    ci = ChannelInput(np.zeros((1, 1, 1, 2)), np.zeros((1, 1, 1, 2)), np.zeros((1, 1, 1, 1)),
                      np.zeros((1, 1, 1, 5)))
    try:
        audio_input_tokens(ci)
    except TypeError:
        return True, "ChannelInput rejected"
    return False, "ChannelInput accepted by audio branch"


# ---------------------------------------------------------------------------
# flow-matching
# ---------------------------------------------------------------------------

@check("flow.interpolation_identity")
def _(faults):
    rng = rng_for(17)
    bad = 0
    for t in (0.0, 0.25, 0.3, 0.5, 1.0):
        z0, za = rng.standard_normal((2, 2, 2, 2)), rng.standard_normal((4, 2))
        s = make_flow_sample(z0, za, t, rng)
        bad += not np.all(s.z_v_t - (t * z0 + (1 - t) * s.eps_v) == 0)
        bad += not np.all(s.z_a_t - (t * za + (1 - t) * s.eps_a) == 0)
    s0 = make_flow_sample(z0, za, 0.0, rng)
    s1 = make_flow_sample(z0, za, 1.0, rng)
    ends = np.array_equal(s0.z_v_t, s0.eps_v) and np.array_equal(s1.z_v_t, z0)
    return bad == 0 and ends, f"{bad} inexact interpolations; endpoints exact: {ends}"


@check("flow.loss_symmetry")
def _(faults):
    rng = rng_for(18)
    s = make_flow_sample(rng.standard_normal((2, 2, 2, 2)), rng.standard_normal((4, 2)), 0.3, rng)
    pv, pa = rng.standard_normal(s.target_v.shape), rng.standard_normal(s.target_a.shape)
    swapped = make_flow_sample(s.z_v0, s.z_a0, 0.3, rng, s.eps_v, s.eps_a)
    swapped.target_v = pv
    l1 = joint_loss(Tensor(pv), Tensor(pa), s).item()
    l2 = joint_loss(Tensor(s.target_v), Tensor(pa), swapped).item()
    return l1 == l2, f"{l1!r} vs {l2!r}"


@check("flow.model_grad_check")
def _(faults):
    m = build_model(small_cfg(), seed=19)
    m.randomize(rng_for(20), 0.5)
    rng = rng_for(21)
    s = make_flow_sample(rng.standard_normal((2, 2, 2, 2)), rng.standard_normal((4, 2)), 0.6, rng)
    mask = np.zeros((2, 2, 2, 1))
    mask[0] = 1
    cond = ConditionBundle(rng.standard_normal((3, 16)), s.z_v0, mask, 4)

    def f(zv):
        pv, pa = m(zv, Tensor(s.z_a_t), s.t, cond)
        return joint_loss(pv, pa, s, 1.0 - mask)

    zv = Tensor(s.z_v_t)
    err = grad_check(f, zv)
    p = m.video_in.weight
    err = max(err, grad_check(lambda _: f(zv), p, coords=range(0, p.size, 11)))
    return err < 1e-4, f"max rel err {err:.2e}"


class ConstantVelocity:
    """Exact flow field ``v = z0 - eps`` for a known (z0, eps) pair."""

    def __init__(self, z0_v, z0_a, eps_v, eps_a):
        self.vv, self.va = z0_v - eps_v, z0_a - eps_a

    def __call__(self, z_v, z_a, t, cond):
        return self.vv, self.va


@check("flow.sampler_consistency")
def _(faults):
    rng = rng_for(22)
    dy = lambda *s: rng.integers(-16, 17, s) / 8.0
    z0_v, z0_a, e_v, e_a = dy(2, 2, 2, 2), dy(4, 2), dy(2, 2, 2, 2), dy(4, 2)
    cond = ConditionBundle(np.zeros((1, 4)), np.zeros((2, 2, 2, 2)), np.zeros((2, 2, 2, 1)), 4)
    model = ConstantVelocity(z0_v, z0_a, e_v, e_a)
    bad = []
    for steps in (1, 2, 4, 8):
        zv, za = euler_sample(model, cond, steps, rng, 2, eps_v=e_v, eps_a=e_a)
        if not (np.array_equal(zv, z0_v) and np.array_equal(za, z0_a)):
            bad.append(steps)
    return not bad, f"inexact step counts {bad}" if bad else "exact for 1, 2, 4, 8 steps"


# ---------------------------------------------------------------------------
# sparse-attention-vsa
# ---------------------------------------------------------------------------

def _qkv(rng, n, heads=2, dh=8):
    return (rng.standard_normal((n, heads, dh)) for _ in range(3))


@check("vsa.full_k_equivalence")
def _(faults):
    worst = 0.0
    for seed in range(5):
        plan = make_plan((4, 4, 4), (2, 2, 3), 1)
        plan.K = plan.cubes.n_cubes
        q, k, v = _qkv(rng_for(23 + seed), 64)
        coarse_select(q, k, plan)
        worst = max(worst, np.abs(sparse_attention(q, k, v, plan) - dense_attention(q, k, v)).max())
    return worst <= 1e-12, f"max diff {worst:.1e}"


@check("vsa.self_cube_coverage")
def _(faults):
    rng = rng_for(28)
    bad = 0
    for K in range(1, 9):
        plan = make_plan((4, 4, 4), (2, 2, 2), K)
        q, k, _ = _qkv(rng, 64)
        sel = coarse_select(q, k, plan)
        bad += sum(a not in s for a, s in enumerate(sel))
    return bad == 0, f"{bad} query cubes missing their own cube"


@check("vsa.selection_determinism")
def _(faults):
    q, k, _ = _qkv(rng_for(29), 64)
    k_tied = np.zeros_like(k)
    same = True
    for keys in (k, k_tied):
        sels = []
        for _ in range(2):
            plan = make_plan((4, 4, 4), (2, 2, 2), 3)
            sels.append(coarse_select(q, keys, plan))
        same &= all(np.array_equal(a, b) for a, b in zip(*sels))
    return same, "identical selections on repeat (including all-tied scores)"


def fidelity_curve(grid=(8, 8, 8), cube=(4, 4, 4), seed=30):
    q, k, v = _qkv(rng_for(seed), int(np.prod(grid)))
    dense = dense_attention(q, k, v)
    n = make_plan(grid, cube, 1).cubes.n_cubes
    errs = []
    for K in range(1, n + 1):
        plan = make_plan(grid, cube, K)
        coarse_select(q, k, plan)
        errs.append(float(((sparse_attention(q, k, v, plan) - dense) ** 2).mean()))
    return errs


@check("vsa.monotone_fidelity")
def _(faults):
    errs = fidelity_curve((4, 4, 4), (2, 2, 2))
    ok = all(b <= a for a, b in zip(errs, errs[1:]))
    return ok, "mse by K: " + ", ".join(f"{e:.2e}" for e in errs)


@check("vsa.flop_ledger_exactness")
def _(faults):
    rng = rng_for(31)
    bad = 0
    for grid, cube, K in [((4, 4, 4), (2, 2, 2), 3), ((5, 3, 4), (2, 2, 3), 2), ((3, 3, 3), (3, 3, 3), 1)]:
        plan = make_plan(grid, cube, K)
        q, k, _ = _qkv(rng, int(np.prod(grid)))
        coarse_select(q, k, plan)
        bad += flop_report(plan, 2, 8).fine != O.fine_flops_enumerated(plan, 2, 8)
    return bad == 0, f"{bad} ledgers disagree with pairwise enumeration"


# ---------------------------------------------------------------------------
# refiner
# ---------------------------------------------------------------------------

def _refiner_case(rng):
    low = rng.standard_normal((3, 2, 2, 2))
    kf = [(0, rng.standard_normal((4, 4, 2))), (4, rng.standard_normal((4, 4, 2)))]
    src = rng.standard_normal((5, 4, 4, 2))
    mask = np.zeros((4, 4))
    mask[1:3, :2] = 1
    return low, kf, src, mask


@check("refiner.splice_exactness")
def _(faults):
    rng = rng_for(32)
    low, kf, src, mask = _refiner_case(rng)
    ri = assemble_refiner_input(low, kf, (5, 4, 4), rng.standard_normal((5, 4, 4, 2)), src, mask)
    m = mask.astype(bool)
    ok = all(np.array_equal(ri.assembled[p][~m], f[~m]) for p, f in kf)
    ok &= np.array_equal(ri.assembled[:, m], src[:, m])
    return bool(ok), "keyframes and preserved region bitwise"


@check("refiner.inpaint_wins_over_keyframe")
def _(faults):
    rng = rng_for(33)
    low, kf, src, mask = _refiner_case(rng)
    spliced = splice_inpaint(splice_keyframes(upsample_latent(low, (5, 4, 4)), kf), src, mask)
    m = mask.astype(bool)
    return bool(np.array_equal(spliced[0][m], src[0][m])), "source wins at keyframe overlap"


@check("refiner.upsample_linearity_and_oracle")
def _(faults):
    rng = rng_for(34)
    x, y = rng.standard_normal((3, 2, 3, 2)), rng.standard_normal((3, 2, 3, 2))
    a, b = 1.7, -0.4
    tgt = (5, 4, 7)
    lin = np.abs(upsample_latent(a * x + b * y, tgt) - (a * upsample_latent(x, tgt) + b * upsample_latent(y, tgt))).max()
    ora = np.abs(upsample_latent(x, tgt) - O.upsample_separable(x, tgt)).max()
    return lin <= 1e-12 and ora <= 1e-12, f"linearity {lin:.1e}, separable oracle {ora:.1e}"


@check("refiner.sparse_full_k_equivalence")
def _(faults):
    cfg = small_cfg()
    base = build_model(cfg, seed=35)
    base.randomize(rng_for(36), 0.5)
    rng = rng_for(37)
    low, kf, src, mask = _refiner_case(rng)
    ri = assemble_refiner_input(low, kf, (5, 4, 4), rng.standard_normal((5, 4, 4, 2)), src, mask)
    za, text = rng.standard_normal((6, 2)), rng.standard_normal((3, 16))
    dense = Refiner(base)(ri.z, za, 0.5, text)
    n = make_plan((5, 4, 4), (2, 2, 2), 1).cubes.n_cubes
    sparse = Refiner(base, SparseSpec((2, 2, 2), n))(ri.z, za, 0.5, text)
    err = max(np.abs(dense[0].data - sparse[0].data).max(), np.abs(dense[1].data - sparse[1].data).max())
    return err <= 1e-10, f"max diff {err:.1e}"


# ---------------------------------------------------------------------------
# harness
# ---------------------------------------------------------------------------

def _tiny_run_config():
    from .config import RunConfig
    cfg = RunConfig()
    cfg.model = small_cfg()
    cfg.train.steps = 3
    cfg.train.fixed_noise = False
    return cfg


@check("harness.train_determinism")
def _(faults):
    from .drivers import run_train
    with tempfile.TemporaryDirectory() as d:
        texts = []
        for run in ("a", "b"):
            res = run_train(_tiny_run_config(), Path(d) / run)
            texts.append(res.metrics_path.read_bytes())
    return texts[0] == texts[1], "metrics CSVs byte-identical"


@check("harness.checkpoint_round_trip")
def _(faults):
    from .checkpoint import load_checkpoint, save_checkpoint
    m = build_model(small_cfg(), seed=38)
    m.randomize(rng_for(39), 1.0)
    with tempfile.TemporaryDirectory() as d:
        save_checkpoint(Path(d) / "c.mmdt", m, 0)
        back = load_checkpoint(Path(d) / "c.mmdt").model
    same = all(np.array_equal(p.data, q.data) and p.data.tobytes() == q.data.tobytes()
               for p, q in zip(m.parameters(), back.parameters()))
    return same, "parameters bitwise equal"


@check("harness.mixed_task_coverage")
def _(faults):
    from .synthetic import gen_synthetic_batch
    batch = gen_synthetic_batch(40, "mixed", 10)
    kinds = [s.task.kind for s in batch]
    ok = all(set(kinds[i:i + 5]) == set(TASK_KINDS) for i in (0, 5))
    return ok, f"kinds {kinds[:5]}"


# ---------------------------------------------------------------------------

def run_checks(faults=(), only: str | None = None) -> list[tuple[str, bool, str]]:
    unknown = set(faults) - set(FAULTS)
    if unknown:
        raise ParameterError(f"unknown faults {sorted(unknown)}; known: {FAULTS}")
    results = []
    for name, fn in CHECKS:
        if only and not name.startswith(only):
            continue
        try:
            ok, detail = fn(set(faults))
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results


def format_report(results) -> str:
    lines = [f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})" for name, ok, detail in results]
    n_fail = sum(not ok for _, ok, _ in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
