"""Task masks for the five conditioning kinds, and the refiner's input assembly.

Run: python3 demos/tasks_and_refiner.py
"""
import numpy as np

from mmdt.conditioning import TaskSpec, build_task_mask, frame_flags
from mmdt.refiner import assemble_refiner_input, default_keyframe_positions

T, H, W, C = 6, 4, 4, 2
edit = np.zeros((T, H, W, 1))
edit[:, :2] = 1
for spec in [TaskSpec("t2v", T, H, W, C), TaskSpec("i2v", T, H, W, C), TaskSpec("extend", T, H, W, C, k=2),
             TaskSpec("startend", T, H, W, C), TaskSpec("edit", T, H, W, C, edit_mask=edit)]:
    m = build_task_mask(spec)
    flags = frame_flags(m) if spec.kind != "edit" else "(spatial)"
    print(f"{spec.kind:9s} per-frame flags {flags}  known fraction {m.mean():.2f}")

rng = np.random.default_rng(np.random.Philox(3))
low = rng.standard_normal((3, 2, 2, C))
target = (9, 4, 4)
positions = default_keyframe_positions(target[0])
keyframes = [(p, rng.standard_normal(target[1:] + (C,))) for p in positions]
source = rng.standard_normal(target + (C,))
keep = np.zeros(target[1:])
keep[:, :1] = 1  # preserve the left column of the source

ri = assemble_refiner_input(low, keyframes, target, rng.standard_normal(target + (C,)), source, keep)
print(f"keyframes at {positions}; refiner input channels {ri.z.shape[-1]} (noisy, assembled, mask)")
print("preserved column equals source:", np.array_equal(ri.assembled[:, :, :1], source[:, :, :1]))
print("keyframe 4 outside the preserved column spliced exactly:",
      np.array_equal(ri.assembled[4, :, 1:], keyframes[1][1][:, 1:]))
