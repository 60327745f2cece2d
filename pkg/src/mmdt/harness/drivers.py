"""Train / sample / bench drivers shared by the CLI, tests, and demos."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..flow import AdamState, StepLoss, euler_sample, make_flow_sample, train_step
from ..model import JointAVModel, build_model
from ..vsa import DEFAULT_SWEEP, bench_rows
from .checkpoint import load_checkpoint, save_checkpoint, save_latents
from .config import RunConfig
from .synthetic import gen_synthetic_batch, make_sample

METRICS_HEADER = "step,loss_total,loss_video,loss_audio"
CHECKPOINT_NAME = "checkpoint.mmdt"
METRICS_NAME = "metrics.csv"

# independent Philox streams per purpose, keyed by (seed, stream)
_STREAM_FIXED_NOISE = 3
_STREAM_STEP_NOISE = 2
_STREAM_SAMPLER = 4


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.Philox(np.random.SeedSequence([seed, stream])))


@dataclass
class TrainResult:
    model: JointAVModel
    adam: AdamState
    step: int
    losses: list[StepLoss]
    checkpoint_path: Path
    metrics_path: Path


def _format_row(step: int, loss: StepLoss) -> str:
    return f"{step},{loss.total!r},{loss.video!r},{loss.audio!r}"


def read_metrics(path) -> list[tuple[int, float, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or ",".join(rows[0]) != METRICS_HEADER:
        raise ValueError(f"{path}: missing metrics header")
    return [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]


def run_train(cfg: RunConfig, out_dir, resume=None, steps: int | None = None) -> TrainResult:
    """Train until the global step count reaches ``steps`` (default: config), checkpointing at the end.

    Metrics rows carry the pre-update loss of each step. Resuming appends to
    an existing metrics file in ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    total_steps = cfg.train.steps if steps is None else int(steps)
    rng = stream_rng(cfg.train.seed, _STREAM_STEP_NOISE)
    if resume is not None:
        ck = load_checkpoint(resume)
        model, adam, start = ck.model, ck.adam, ck.step
        if ck.rng_state is not None:
            rng.bit_generator.state = ck.rng_state
        cfg.model = model.cfg
    else:
        model = build_model(cfg.model, seed=cfg.train.seed)
        adam, start = AdamState(lr=cfg.train.lr), 0

    data = gen_synthetic_batch(cfg.data.seed, cfg.data.task, cfg.data.count,
                               cfg.data.dims(cfg.model), cfg.model.model_dim)
    fixed = None
    if cfg.train.fixed_noise:
        frng = stream_rng(cfg.train.seed, _STREAM_FIXED_NOISE)
        fixed = [(make_flow_sample(s.z_v0, s.z_a0, float(frng.uniform()), frng), s.cond) for s in data]

    metrics_path = out / METRICS_NAME
    append = resume is not None and metrics_path.exists()
    losses = []
    with open(metrics_path, "a" if append else "w") as fh:
        if not append:
            fh.write(METRICS_HEADER + "\n")
        for step in range(start, total_steps):
            batch = fixed or [(make_flow_sample(s.z_v0, s.z_a0, float(rng.uniform()), rng), s.cond)
                              for s in data]
            adam, loss = train_step(model, batch, adam)
            losses.append(loss)
            fh.write(_format_row(step, loss) + "\n")
            fh.flush()
    ck_path = out / CHECKPOINT_NAME
    save_checkpoint(ck_path, model, max(start, total_steps), adam, rng.bit_generator.state, cfg.to_text())
    return TrainResult(model, adam, max(start, total_steps), losses, ck_path, metrics_path)


def run_sample(cfg: RunConfig, checkpoint, out_path, task: str | None = None,
               steps: int | None = None, seed: int | None = None):
    """Generate one video/audio latent pair for a synthetic condition and write an archive."""
    ck = load_checkpoint(checkpoint)
    task = task or cfg.data.task
    steps = cfg.sample.steps if steps is None else int(steps)
    seed = cfg.train.seed if seed is None else int(seed)
    sample = make_sample(cfg.data.seed, 0, task, cfg.data.dims(ck.model.cfg), ck.model.cfg.model_dim)
    z_v, z_a = euler_sample(ck.model, sample.cond, steps, stream_rng(seed, _STREAM_SAMPLER),
                            guidance_scale=cfg.sample.guidance_scale,
                            uncond=None if cfg.sample.guidance_scale == 1.0 else sample.cond)
    meta = {"steps": steps, "task": task, "seed": seed, "checkpoint_step": ck.step,
            "guidance_scale": cfg.sample.guidance_scale}
    save_latents(out_path, z_v, z_a, meta)
    return z_v, z_a, meta


BENCH_COLUMNS = ("grid", "cube", "K", "coarse_flops", "fine_flops", "dense_flops",
                 "reduction", "max_abs_err_vs_dense")


def run_bench(out_path, sweep=DEFAULT_SWEEP, seed: int = 0) -> list[dict]:
    rows = bench_rows(sweep, seed=seed)
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return rows


def apply_thread_cap() -> None:
    """Cap BLAS threads at ``MMDT_THREADS`` (default 1) so results do not depend on core count."""
    from threadpoolctl import threadpool_limits
    threadpool_limits(int(os.environ.get("MMDT_THREADS", "1")))
