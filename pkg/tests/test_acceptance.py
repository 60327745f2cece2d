"""Acceptance criteria, one function each, at their stated tolerances and runtime budgets.

Run under pytest (a PASS/FAIL line per criterion is printed in the terminal
summary) or directly with ``python3 tests/test_acceptance.py``.
"""
import itertools
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from mmdt.autodiff import Tensor, grad_check
from mmdt import autodiff as ad
from mmdt.blocks import (DualStreamBlock, ModelConfig, SingleStreamBlock, TokenSequence, TwinBackbone,
                         branch_forward)
from mmdt.conditioning import TASK_KINDS, ConditionBundle, TaskSpec, build_task_mask, frame_flags, grid_rope, prepend_references
from mmdt.flow import euler_sample, joint_loss, make_flow_sample
from mmdt.harness import oracles as O
from mmdt.harness.config import RunConfig
from mmdt.harness.checkpoint import load_checkpoint
from mmdt.harness.drivers import CHECKPOINT_NAME, METRICS_NAME, read_metrics, run_bench, run_train
from mmdt.harness.synthetic import gen_synthetic_batch
from mmdt.harness.verify import ConstantVelocity, _refiner_case, fidelity_curve, random_tokens, rng_for
from mmdt.model import build_model
from mmdt.refiner import assemble_refiner_input, upsample_latent
from mmdt.rope import RopePlan, audio_scale_factor, grid_indices
from mmdt.vsa import dense_attention, full_selection, make_plan, sparse_attention

RESULTS: dict[int, tuple[bool, str]] = {}
CRITERIA = {}


def criterion(number: int, title: str, budget: float | None = None):
    def wrap(fn):
        def run():
            start = time.perf_counter()
            ok, detail = fn()
            elapsed = time.perf_counter() - start
            if budget is not None and elapsed >= budget:
                ok, detail = False, f"{detail}; over budget {elapsed:.1f}s >= {budget}s"
            RESULTS[number] = (bool(ok), f"{title}: {detail} [{elapsed:.2f}s]")
            return bool(ok), detail
        CRITERIA[number] = run
        return run
    return wrap


def report_line(n: int) -> str:
    ok, text = RESULTS[n]
    return f"{'PASS' if ok else 'FAIL'}  criterion {n:2d}  {text}"


def report_lines() -> list[str]:
    return [report_line(n) for n in sorted(RESULTS)]


@criterion(1, "audio RoPE scale 21/218", budget=1.0)
def c1():
    s = audio_scale_factor(21, 218)
    return abs(s - 0.09633) <= 5e-5, f"{s:.6f} vs 0.09633 (tol 5e-5)"


@criterion(2, "task-mask matrix", budget=1.0)
def c2():
    rng = rng_for(2)
    checked = bad = 0
    for T in (2, 3, 4, 8):
        for kind in TASK_KINDS:
            if kind == "edit":
                m = rng.integers(0, 2, (T, 2, 3, 1)).astype(float)
                bad += not np.array_equal(build_task_mask(TaskSpec(kind, T, 2, 3, 2, edit_mask=m)), m)
                checked += 1
                continue
            for k in (range(1, T) if kind == "extend" else [None]):
                got = frame_flags(build_task_mask(TaskSpec(kind, T, 2, 3, 2, k=k)))
                bad += got != O.task_flags_table(kind, T, k)
                checked += 1
    return bad == 0, f"{checked - bad}/{checked} (kind, T, k) cases match the table"


@criterion(3, "gradient fidelity through the 2+2 desk model", budget=60.0)
def c3():
    cfg = ModelConfig()
    model = build_model(cfg, seed=3)
    model.randomize(rng_for(4), 0.3)
    data = gen_synthetic_batch(5, "i2v", 1, RunConfig().data.dims(cfg), cfg.model_dim)[0]
    rng = rng_for(6)
    s = make_flow_sample(data.z_v0, data.z_a0, 0.37, rng)
    weight = 1.0 - data.cond.mask
    zv, za = Tensor(s.z_v_t.copy()), Tensor(s.z_a_t.copy())

    def loss():
        pv, pa = model(zv, za, s.t, data.cond)
        return joint_loss(pv, pa, s, weight)

    worst = max(grad_check(lambda _: loss(), zv), grad_check(lambda _: loss(), za))
    n_coords = 0
    for p in model.parameters():
        coords = [int(rng.integers(p.size))]
        worst = max(worst, grad_check(lambda _: loss(), p, coords=coords))
        n_coords += len(coords)
    probed = zv.size + za.size + n_coords
    return worst < 1e-4, f"max rel err {worst:.2e} over {probed} coordinates (tol 1e-4)"


@criterion(4, "tied dual-stream equals single-stream", budget=5.0)
def c4():
    worst = 0.0
    for seed in range(10):
        cfg = ModelConfig(m_dual=1, n_single=1, model_dim=16, head_count=2, mlp_ratio=2, timestep_embed_dim=8)
        dual = DualStreamBlock(cfg, rng_for(seed))
        dual.randomize(rng_for(50 + seed), 0.7)
        dual.tie_streams()
        single = SingleStreamBlock(cfg, rng_for(seed))
        single.shared = dual.x
        r = rng_for(90 + seed)
        x = random_tokens(r, 6, 16, plan=RopePlan(8, grid_indices(1, 2, 3)))
        txt = random_tokens(r, 3, 16, "text")
        c = Tensor(r.standard_normal((1, 16)))
        ox, ot = dual(x, txt, c)
        mixed = TokenSequence(ad.concat([x.tokens, txt.tokens]), "mixed", x.plan(8).concat(txt.plan(8)))
        oh = single(mixed, c)
        worst = max(worst, np.abs(np.concatenate([ox.tokens.data, ot.tokens.data]) - oh.tokens.data).max())
    return worst <= 1e-10, f"max diff {worst:.1e} over 10 seeds (tol 1e-10)"


@criterion(5, "identity at init", budget=1.0)
def c5():
    cfg = ModelConfig()
    bb = TwinBackbone(cfg, rng_for(7))
    rng = rng_for(8)
    v = random_tokens(rng, 32, 64, plan=RopePlan(16, grid_indices(2, 4, 4)))
    a = random_tokens(rng, 8, 64, "audio")
    txt = random_tokens(rng, 5, 64, "text")
    ov, oa = branch_forward(bb, v, a, txt, Tensor(rng.standard_normal((1, 64))))
    same = ov.tokens.data.tobytes() == v.tokens.data.tobytes() and oa.tokens.data.tobytes() == a.tokens.data.tobytes()
    return same, "video and audio tokens bitwise unchanged" if same else "residual path altered tokens"


@criterion(6, "sparse attention full-K oracle and monotone fidelity", budget=30.0)
def c6():
    worst = 0.0
    for seed in range(5):
        r = rng_for(60 + seed)
        q, k, v = (r.standard_normal((512, 2, 8)) for _ in range(3))
        plan = make_plan((8, 8, 8), (4, 4, 4), 1)
        full_selection(plan)
        worst = max(worst, np.abs(sparse_attention(q, k, v, plan) - dense_attention(q, k, v)).max())
    errs = fidelity_curve((8, 8, 8), (4, 4, 4))
    mono = all(b <= a for a, b in zip(errs, errs[1:]))
    return worst <= 1e-12 and mono, (f"full-K max diff {worst:.1e} (tol 1e-12); "
                                     f"mse by K on 8x8x8 non-increasing: {mono}")


@criterion(7, "sparse attention FLOP reduction", budget=10.0)
def c7():
    with tempfile.TemporaryDirectory() as d:
        rows = run_bench(Path(d) / "bench.csv")
    best = max(rows, key=lambda r: r["reduction"])
    hits = [r for r in rows if r["reduction"] >= 2.5]
    return bool(hits), (f"{len(hits)} configs >= 2.5; best {best['reduction']:.2f} "
                        f"({best['grid']}, cube {best['cube']}, K={best['K']})")


@criterion(8, "flow endpoints and one-step Euler", budget=1.0)
def c8():
    rng = rng_for(9)
    z0, za = rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((8, 4))
    s0, s1 = make_flow_sample(z0, za, 0.0, rng), make_flow_sample(z0, za, 1.0, rng)
    ends = (np.array_equal(s0.z_v_t, s0.eps_v) and np.array_equal(s0.z_a_t, s0.eps_a)
            and np.array_equal(s1.z_v_t, z0) and np.array_equal(s1.z_a_t, za))
    cond = ConditionBundle(np.zeros((1, 4)), np.zeros((2, 4, 4, 4)), np.zeros((2, 4, 4, 1)), 8)
    # bitwise on data whose differences are representable
    dy = lambda *shape: rng.integers(-64, 65, shape) / 16.0
    d0v, d0a, dev, dea = dy(2, 4, 4, 4), dy(8, 4), dy(2, 4, 4, 4), dy(8, 4)
    zv, zaa = euler_sample(ConstantVelocity(d0v, d0a, dev, dea), cond, 1, rng, 4, eps_v=dev, eps_a=dea)
    exact = np.array_equal(zv, d0v) and np.array_equal(zaa, d0a)
    # arbitrary floats: eps + (z0 - eps) rounds twice, so allow one ulp
    ev, ea = rng.standard_normal(z0.shape), rng.standard_normal(za.shape)
    gv, ga = euler_sample(ConstantVelocity(z0, za, ev, ea), cond, 1, rng, 4, eps_v=ev, eps_a=ea)
    ulp = max((np.abs(gv - z0) / np.spacing(np.maximum(np.abs(z0), np.abs(ev)))).max(),
              (np.abs(ga - za) / np.spacing(np.maximum(np.abs(za), np.abs(ea)))).max())
    return ends and exact and ulp <= 1, (f"endpoints exact: {ends}; one step bitwise on dyadic data: {exact}; "
                                        f"arbitrary data within {ulp:.0f} ulp")


@criterion(9, "overfit regression, determinism and resume", budget=300.0)
def c9():
    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        runs = [run_train(RunConfig(), d / name) for name in ("a", "b")]
        run_train(RunConfig(), d / "r", steps=100)
        run_train(RunConfig(), d / "r", resume=d / "r" / CHECKPOINT_NAME)
        rows = read_metrics(d / "a" / METRICS_NAME)
        same = (d / "a" / METRICS_NAME).read_bytes() == (d / "b" / METRICS_NAME).read_bytes()
        resumed = (d / "a" / METRICS_NAME).read_bytes() == (d / "r" / METRICS_NAME).read_bytes()
        final = load_checkpoint(d / "r" / CHECKPOINT_NAME).model
        params = all(p.data.tobytes() == q.data.tobytes()
                     for p, q in zip(runs[0].model.parameters(), final.parameters()))
    first, last = rows[0][1], rows[-1][1]
    ratio = last / first
    ok = len(rows) == 200 and ratio < 0.1 and same and resumed and params
    return ok, (f"loss {first:.4g} -> {last:.4g} ({ratio:.2%} of initial, need < 10%); "
                f"repeat run bitwise: {same}; resumed metrics bitwise: {resumed}; resumed params bitwise: {params}")


@criterion(10, "refiner splice exactness and upsample checks", budget=5.0)
def c10():
    rng = rng_for(10)
    low, kf, src, mask = _refiner_case(rng)
    ri = assemble_refiner_input(low, kf, (5, 4, 4), rng.standard_normal((5, 4, 4, 2)), src, mask)
    m = mask.astype(bool)
    keyframes = all(np.array_equal(ri.assembled[p][~m], f[~m]) for p, f in kf)
    preserved = np.array_equal(ri.assembled[:, m], src[:, m])
    ri2 = assemble_refiner_input(low, kf, (5, 4, 4), rng.standard_normal((5, 4, 4, 2)))
    keyframes &= all(np.array_equal(ri2.assembled[p], f) for p, f in kf)
    x, y = rng.standard_normal((3, 2, 3, 2)), rng.standard_normal((3, 2, 3, 2))
    tgt = (5, 4, 7)
    lin = np.abs(upsample_latent(1.7 * x - 0.4 * y, tgt)
                 - (1.7 * upsample_latent(x, tgt) - 0.4 * upsample_latent(y, tgt))).max()
    ora = np.abs(upsample_latent(x, tgt) - O.upsample_separable(x, tgt)).max()
    ok = keyframes and preserved and lin <= 1e-12 and ora <= 1e-12
    return ok, (f"keyframes bitwise: {keyframes}; preserved region bitwise: {preserved}; "
                f"linearity {lin:.1e}, separable oracle {ora:.1e} (tol 1e-12)")


@criterion(11, "in-context reference offsets", budget=1.0)
def c11():
    z = rng_for(11).standard_normal((3, 2, 2, 2))
    build = grid_rope(8)
    bad = tested = 0
    for size in range(1, 4):
        for counts in itertools.combinations_with_replacement((1, 2, 3), size):
            refs = [np.zeros((c, 2, 2, 2)) for c in counts]
            _, plan = prepend_references(refs, z, build)
            n = sum(counts)
            t = plan.indices[:, 0].reshape(n + 3, 4)
            want = np.array([-n + i for i in range(n)] + [0, 1, 2])
            bad += not (np.all(t == want[:, None]) and np.array_equal(plan.indices[n * 4:], grid_indices(3, 2, 2)))
            tested += 1
    out, plan = prepend_references([], z, build)
    ident = out is z and np.array_equal(plan.indices, grid_indices(3, 2, 2))
    return bad == 0 and ident, f"{tested - bad}/{tested} reference multisets exact; zero references identity: {ident}"


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_acceptance(number):
    ok, detail = CRITERIA[number]()
    assert ok, detail


if __name__ == "__main__":
    for n in sorted(CRITERIA):
        CRITERIA[n]()
        print(report_line(n), flush=True)
    raise SystemExit(0 if all(ok for ok, _ in RESULTS.values()) else 1)
