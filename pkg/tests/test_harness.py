import struct

import numpy as np
import pytest

from mmdt.blocks import ModelConfig
from mmdt.conditioning import TASK_KINDS
from mmdt.errors import FormatError, ParameterError
from mmdt.flow import AdamState
from mmdt.harness import cli
from mmdt.harness.checkpoint import (load_checkpoint, load_latents, read_archive, save_checkpoint,
                                     save_latents, write_archive)
from mmdt.harness.config import RunConfig
from mmdt.harness.drivers import CHECKPOINT_NAME, METRICS_HEADER, METRICS_NAME, read_metrics, run_train
from mmdt.harness.synthetic import SynthDims, audio_peak_index, gen_synthetic_batch
from mmdt.harness.text_stub import (START_TOKEN, CaptionRecord, embed_prompt_stub, slot_embedding,
                                    token_embedding)
from mmdt.harness.verify import format_report, run_checks, small_cfg
from mmdt.model import build_model


# -- text stub ---------------------------------------------------------------

def test_stub_deterministic_and_unit_norm():
    a = embed_prompt_stub("a red ball bounces", 32)
    b = embed_prompt_stub("a red ball bounces", 32)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)


def test_stub_rows_are_per_token():
    a = embed_prompt_stub("a red ball", 16)
    b = embed_prompt_stub("a blue ball", 16)
    np.testing.assert_array_equal(a[[0, 2]], b[[0, 2]])
    assert not np.array_equal(a[1], b[1])


def test_stub_empty_caption_is_start_token():
    np.testing.assert_array_equal(embed_prompt_stub("", 8), token_embedding(START_TOKEN, 8)[None])


def test_stub_length_pads_and_truncates():
    assert embed_prompt_stub("one two three", 8, length=2).shape == (2, 8)
    out = embed_prompt_stub("one", 8, length=3)
    np.testing.assert_array_equal(out[1], out[2])


def test_stub_reference_slots():
    out = embed_prompt_stub("the cat from @image_2 and @Image_1", 8, ref_slots=["@image_1", "@image_2"])
    np.testing.assert_array_equal(out[3], slot_embedding(1, 8))
    np.testing.assert_array_equal(out[5], slot_embedding(0, 8))
    unbound = embed_prompt_stub("@image_1", 8)
    np.testing.assert_array_equal(unbound[0], token_embedding("@image_1", 8))


def test_caption_record_renders_special_fields():
    rec = CaptionRecord(description="a dog", sfx="bark", bgm="piano")
    assert rec.render() == "a dog <sfx> bark </sfx> <bgm> piano </bgm>"


def test_stub_rejects_bad_dim():
    with pytest.raises(ParameterError):
        embed_prompt_stub("x", 0)


# -- synthetic data ----------------------------------------------------------

def test_batch_count_zero():
    assert gen_synthetic_batch(0, "i2v", 0) == []


def test_batches_bit_identical():
    a, b = gen_synthetic_batch(5, "mixed", 5), gen_synthetic_batch(5, "mixed", 5)
    for x, y in zip(a, b):
        assert x.z_v0.tobytes() == y.z_v0.tobytes()
        assert x.z_a0.tobytes() == y.z_a0.tobytes()
        assert x.cond.text.tobytes() == y.cond.text.tobytes()


def test_i2v_condition_frame_equals_target():
    s = gen_synthetic_batch(1, "i2v", 1)[0]
    np.testing.assert_array_equal(s.cond.cond_frames[0], s.z_v0[0])
    np.testing.assert_array_equal(s.cond.cond_frames[1:], np.broadcast_to(s.cond.black, s.z_v0[1:].shape))


def test_mixed_covers_every_task():
    kinds = [s.task.kind for s in gen_synthetic_batch(2, "mixed", 10)]
    assert set(kinds[:5]) == set(kinds[5:]) == set(TASK_KINDS)


@pytest.mark.parametrize("e,T,L,expected", [(0, 2, 8, 0), (1, 2, 8, 4), (20, 21, 218, 208), (3, 4, 4, 3)])
def test_audio_peak_index(e, T, L, expected):
    assert audio_peak_index(e, T, L) == expected


def test_audio_envelope_peaks_at_event():
    for s in gen_synthetic_batch(3, "t2v", 4, SynthDims(frames=4, audio_tokens=16)):
        env = np.abs(s.z_a0).sum(axis=1)
        assert env.argmax() == audio_peak_index(s.event_frame, 4, 16)


def test_batch_rejections():
    with pytest.raises(ParameterError):
        gen_synthetic_batch(0, "nope", 1)
    with pytest.raises(ParameterError):
        gen_synthetic_batch(0, "i2v", 1, SynthDims(frames=1))
    with pytest.raises(ParameterError):
        gen_synthetic_batch(0, "t2v", 1, SynthDims(height=65))


def test_reference_sample_has_slot():
    s = gen_synthetic_batch(4, "t2v", 1, with_reference=True)[0]
    assert s.cond.references is not None and len(s.cond.references) == 1
    assert "@image_1" in s.caption.render()


# -- archives ----------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path, rng):
    m = build_model(small_cfg(), seed=1)
    m.randomize(rng, 1.0)
    adam = AdamState(lr=3e-4, step=7)
    for name, p in m.named_parameters():
        adam.m[name], adam.v[name] = rng.standard_normal(p.shape), rng.random(p.shape)
    state = np.random.default_rng(np.random.Philox(9)).bit_generator.state
    save_checkpoint(tmp_path / "c.mmdt", m, 7, adam, state, "[x]\ny = 1\n")
    ck = load_checkpoint(tmp_path / "c.mmdt")
    assert ck.step == 7 and ck.model.cfg == m.cfg
    g1, g2 = np.random.Generator(np.random.Philox()), np.random.Generator(np.random.Philox())
    g1.bit_generator.state, g2.bit_generator.state = state, ck.rng_state
    assert g1.integers(0, 2**63, 4).tolist() == g2.integers(0, 2**63, 4).tolist()
    for (n, p), (n2, q) in zip(m.named_parameters(), ck.model.named_parameters()):
        assert n == n2 and p.data.tobytes() == q.data.tobytes()
        assert ck.adam.m[n].tobytes() == adam.m[n].tobytes()
    assert ck.adam.step == 7 and ck.adam.lr == 3e-4


def test_version_mismatch_names_both(tmp_path):
    write_archive(tmp_path / "a.mmdt", "", {"x": np.zeros(2)}, version=9)
    with pytest.raises(FormatError, match=r"9.*1|1.*9"):
        read_archive(tmp_path / "a.mmdt")


@pytest.mark.parametrize("mutate", ["magic", "truncate", "trailing"])
def test_corrupt_archives_rejected(tmp_path, mutate):
    p = tmp_path / "a.mmdt"
    write_archive(p, "[h]\nk = v\n", {"x": np.arange(4.0).reshape(2, 2)})
    raw = p.read_bytes()
    raw = {"magic": b"XXXX" + raw[4:], "truncate": raw[:-3], "trailing": raw + b"\0"}[mutate]
    p.write_bytes(raw)
    with pytest.raises(FormatError):
        read_archive(p)


def test_archive_layout(tmp_path):
    p = tmp_path / "a.mmdt"
    write_archive(p, "", {"w": np.array([1.5, -2.0])})
    raw = p.read_bytes()
    assert raw[:4] == b"MMDT"
    assert struct.unpack_from("<I", raw, 4)[0] == 1
    assert raw.endswith(struct.pack("<2d", 1.5, -2.0))


def test_latents_round_trip(tmp_path, rng):
    v, a = rng.standard_normal((2, 3, 3, 4)), rng.standard_normal((5, 4))
    save_latents(tmp_path / "s.mmdt", v, a, {"steps": 8, "task": "i2v"})
    v2, a2, meta = load_latents(tmp_path / "s.mmdt")
    assert v.tobytes() == v2.tobytes() and a.tobytes() == a2.tobytes()
    assert meta["steps"] == "8" and meta["task"] == "i2v"


# -- config ------------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.model = ModelConfig(model_dim=32, head_count=2, text_rope=True)
    cfg.train.lr = 0.1 + 0.2
    cfg.data.task = "extend"
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg
    (tmp_path / "r.ini").write_text(cfg.to_text())
    assert RunConfig.load(tmp_path / "r.ini") == cfg


@pytest.mark.parametrize("text", ["[bogus]\nx = 1\n", "[train]\nwat = 1\n"])
def test_config_rejects_unknown(text):
    with pytest.raises(ParameterError):
        RunConfig.from_text(text)


# -- drivers -----------------------------------------------------------------

def _tiny(steps=4, lr=1e-2):
    cfg = RunConfig()
    cfg.model = small_cfg()
    cfg.train.steps, cfg.train.lr = steps, lr
    cfg.train.fixed_noise = False
    return cfg


def test_train_writes_metrics_and_checkpoint(tmp_path):
    res = run_train(_tiny(), tmp_path)
    assert (tmp_path / METRICS_NAME).read_text().splitlines()[0] == METRICS_HEADER
    rows = read_metrics(tmp_path / METRICS_NAME)
    assert [r[0] for r in rows] == [0, 1, 2, 3]
    assert all(abs(r[1] - (r[2] + r[3])) <= 1e-12 for r in rows)
    assert load_checkpoint(tmp_path / CHECKPOINT_NAME).step == res.step == 4


def test_lr_zero_loss_curve_flat_under_fixed_noise(tmp_path):
    cfg = _tiny(lr=0.0)
    cfg.train.fixed_noise = True
    rows = read_metrics(run_train(cfg, tmp_path).metrics_path)
    assert len({r[1] for r in rows}) == 1


def test_resume_matches_uninterrupted(tmp_path):
    full = run_train(_tiny(6), tmp_path / "full")
    run_train(_tiny(6), tmp_path / "part", steps=3)
    run_train(_tiny(6), tmp_path / "part", resume=tmp_path / "part" / CHECKPOINT_NAME)
    assert (tmp_path / "full" / METRICS_NAME).read_bytes() == (tmp_path / "part" / METRICS_NAME).read_bytes()
    resumed = load_checkpoint(tmp_path / "part" / CHECKPOINT_NAME).model
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(full.model.parameters(), resumed.parameters()))


# -- command line ------------------------------------------------------------

def _write_cfg(path, cfg):
    path.write_text(cfg.to_text())
    return str(path)


def test_cli_train_then_sample(tmp_path, capsys):
    conf = _write_cfg(tmp_path / "r.ini", _tiny(2))
    assert cli.main(["train", "--config", conf, "--out", str(tmp_path / "run")]) == 0
    ck = str(tmp_path / "run" / CHECKPOINT_NAME)
    out = tmp_path / "s.mmdt"
    assert cli.main(["sample", "--config", conf, "--checkpoint", ck, "--steps", "2", "--seed", "3",
                     "--out", str(out)]) == 0
    v, a, meta = load_latents(out)
    assert v.shape == (2, 4, 4, 2) and a.shape == (8, 2)
    assert meta["steps"] == "2" and meta["checkpoint_step"] == "2"
    assert np.all(np.isfinite(v)) and np.all(np.isfinite(a))


def test_cli_sample_needs_checkpoint(tmp_path):
    assert cli.main(["sample", "--out", str(tmp_path / "x")]) == cli.EXIT_USAGE


def test_cli_bad_checkpoint_is_usage_error(tmp_path):
    bad = tmp_path / "bad.mmdt"
    bad.write_bytes(b"nope")
    assert cli.main(["sample", "--checkpoint", str(bad), "--out", str(tmp_path / "x")]) == cli.EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_nonfinite_training_exits_nonzero(tmp_path, capsys):
    conf = _write_cfg(tmp_path / "r.ini", _tiny(5, lr=1e200))
    code = cli.main(["train", "--config", conf, "--out", str(tmp_path / "run")])
    assert code == cli.EXIT_NONFINITE
    assert "step" in capsys.readouterr().err


def test_cli_bench(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    assert cli.main(["bench", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "grid,cube,K,coarse_flops,fine_flops,dense_flops,reduction,max_abs_err_vs_dense"
    assert max(float(l.split(",")[6]) for l in lines[1:]) >= 2.5


def test_cli_rejects_unknown_task():
    with pytest.raises(SystemExit):
        cli.main(["train", "--task", "nope"])


# -- verify ------------------------------------------------------------------

def test_verify_clean_and_repeatable():
    a, b = run_checks(), run_checks()
    assert all(ok for _, ok, _ in a)
    assert format_report(a) == format_report(b)


def test_verify_fault_is_caught():
    results = dict((n, ok) for n, ok, _ in run_checks(["text-xattn-sign"]))
    assert not results["blocks.text_cross_attention_residual"]
    assert sum(not ok for ok in results.values()) == 1


def test_verify_unknown_fault():
    with pytest.raises(ParameterError):
        run_checks(["bogus"])


def test_cli_verify_exit_codes(capsys):
    assert cli.main(["verify"]) == 0
    assert "checks passed" in capsys.readouterr().out
    assert cli.main(["verify", "--inject-fault", "text-xattn-sign"]) == cli.EXIT_FAILURE
