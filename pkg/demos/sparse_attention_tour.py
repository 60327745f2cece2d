"""Cube-sparse attention on a video token grid: selection, fidelity and FLOP savings.

Run: python3 demos/sparse_attention_tour.py
"""
import numpy as np

from mmdt.vsa import coarse_select, dense_attention, flop_report, make_plan, sparse_attention

rng = np.random.default_rng(np.random.Philox(7))
grid, cube, heads, head_dim = (8, 8, 8), (4, 4, 4), 2, 16
n = int(np.prod(grid))
q, k, v = (rng.standard_normal((n, heads, head_dim)) for _ in range(3))
dense = dense_attention(q, k, v)

print(f"grid {grid}, cube {cube}: {make_plan(grid, cube, 1).cubes.n_cubes} cubes")
print(" K   mse vs dense   FLOP reduction")
for K in range(1, 9):
    plan = make_plan(grid, cube, K)
    sel = coarse_select(q, k, plan)
    out = sparse_attention(q, k, v, plan)
    led = flop_report(plan, heads, head_dim)
    print(f"{K:2d}   {np.mean((out - dense) ** 2):.3e}      {led.reduction:6.2f}")
    if K == 2:
        print(f"     cube 0 attends to cubes {sel[0].tolist()} (itself always included)")

# At K = all cubes the coarse stage costs extra, so the reduction drops below 1.
