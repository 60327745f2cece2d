"""Overfit the desk-scale joint model on one synthetic clip, then sample from it.

Run: python3 demos/train_and_sample.py [out_dir]
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from mmdt.harness.checkpoint import load_latents
from mmdt.harness.config import RunConfig
from mmdt.harness.drivers import apply_thread_cap, read_metrics, run_sample, run_train

apply_thread_cap()
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="mmdt-demo-"))

# The default config is the overfit regime: one clip, one frozen (t, eps) draw.
cfg = RunConfig()
cfg.train.steps = 120
print(cfg.to_text())

res = run_train(cfg, out)
rows = read_metrics(res.metrics_path)
for step, total, video, audio in rows[:: max(1, len(rows) // 6)] + rows[-1:]:
    print(f"step {step:4d}  loss {total:.3e}  (video {video:.3e}, audio {audio:.3e})")
print(f"checkpoint: {res.checkpoint_path}")

# Euler integration from t=0 (noise) to t=1 (data); conditioning frames stay clamped.
z_v, z_a, meta = run_sample(cfg, res.checkpoint_path, out / "sample.mmdt", steps=8)
z_v2, z_a2, meta2 = load_latents(out / "sample.mmdt")
assert np.array_equal(z_v, z_v2) and np.array_equal(z_a, z_a2)
print(f"sampled video latent {z_v.shape}, audio latent {z_a.shape}, metadata {meta2}")
