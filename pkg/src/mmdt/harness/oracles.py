"""Independent plain-numpy reference implementations.

Nothing here touches the tape. RoPE is recomputed through complex
multiplication, attention through einsum, and the full model through a
straight-line forward that reads parameter arrays directly. Used by the
verify suite and the tests as a second route to every number the library
computes.
"""
from __future__ import annotations

import math

import numpy as np


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def linear(lin, x):
    y = x @ lin.weight.data
    return y if lin.bias is None else y + lin.bias.data


def layer_norm(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def silu(x):
    return x / (1.0 + np.exp(-x))


def softmax(s, mask=None):
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def rope_angles(indices, head_dim, axis_split, base=10000.0, temporal_scale=1.0):
    """Angle per (token, pair) from first principles."""
    indices = np.asarray(indices, dtype=np.float64).reshape(-1, 3)
    cols = []
    for axis, dim in enumerate(axis_split):
        for k in range(dim // 2):
            f = base ** (-(2.0 * k) / dim)
            if axis == 0:
                f *= temporal_scale
            cols.append(indices[:, axis] * f)
    return np.stack(cols, axis=1) if cols else np.zeros((len(indices), 0))


def rope_complex(x, angles):
    """x: [tokens, heads, head_dim]; rotate (even, odd) pairs as complex numbers."""
    z = x[..., 0::2] + 1j * x[..., 1::2]
    z = z * np.exp(1j * angles)[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def plan_angles(plan):
    return rope_angles(plan.indices, plan.head_dim, plan.axis_split, plan.base, plan.temporal_scale)


def attention(q, k, v, mask=None):
    """q: [n_q, H, dh]; returns ([n_q, H*dh], probs [H, n_q, n_k])."""
    dh = q.shape[-1]
    s = np.einsum("qhd,khd->hqk", q, k) / math.sqrt(dh)
    p = softmax(s, mask)
    o = np.einsum("hqk,khd->qhd", p, v)
    return o.reshape(q.shape[0], -1), p


def _heads(x, H):
    return x.reshape(x.shape[0], H, -1)


def _mod_chunks(sp, c):
    return np.split(linear(sp.modulation, silu(c)), 6, axis=1)


def _qkv(sp, x, shift, scale, cfg):
    h = layer_norm(x, cfg.ln_eps) * (1 + scale) + shift
    q, k, v = np.split(linear(sp.qkv, h), 3, axis=1)
    H = cfg.head_count
    return _heads(q, H), _heads(k, H), _heads(v, H)


def _mlp(sp, x, shift, scale, cfg):
    h = layer_norm(x, cfg.ln_eps) * (1 + scale) + shift
    return linear(sp.fc2, gelu(linear(sp.fc1, h)))


def _rot(q, k, angles):
    if angles is None:
        return q, k
    return rope_complex(q, angles), rope_complex(k, angles)


def _resolve_mask(mask, q, k):
    """A callable mask is evaluated on the rotated q, k, as the model does."""
    return mask(q, k) if callable(mask) else mask


def dual_attend(block, x, txt, c, angles=None, mask=None):
    """Returns (x', txt') after the joint-attention half of a dual-stream block."""
    cfg = block.cfg
    mx, mt = _mod_chunks(block.x, c), _mod_chunks(block.t, c)
    qx, kx, vx = _qkv(block.x, x, mx[0], mx[1], cfg)
    qt, kt, vt = _qkv(block.t, txt, mt[0], mt[1], cfg)
    q, k = _rot(np.concatenate([qx, qt]), np.concatenate([kx, kt]), angles)
    o, _ = attention(q, k, np.concatenate([vx, vt]), _resolve_mask(mask, q, k))
    n = len(x)
    return (x + mx[2] * linear(block.x.proj, o[:n]),
            txt + mt[2] * linear(block.t.proj, o[n:]))


def dual_mlp(block, x, txt, c):
    cfg = block.cfg
    mx, mt = _mod_chunks(block.x, c), _mod_chunks(block.t, c)
    return (x + mx[5] * _mlp(block.x, x, mx[3], mx[4], cfg),
            txt + mt[5] * _mlp(block.t, txt, mt[3], mt[4], cfg))


def single_attend(block, h, c, angles=None, mask=None):
    cfg = block.cfg
    m = _mod_chunks(block.shared, c)
    q, k, v = _qkv(block.shared, h, m[0], m[1], cfg)
    q, k = _rot(q, k, angles)
    o, _ = attention(q, k, v, _resolve_mask(mask, q, k))
    return h + m[2] * linear(block.shared.proj, o)


def single_mlp(block, h, c):
    m = _mod_chunks(block.shared, c)
    return h + m[5] * _mlp(block.shared, h, m[3], m[4], block.cfg)


def cross_attention(ca, x, ctx, q_angles=None, k_angles=None, sign=1.0):
    H = ca.cfg.head_count
    q = _heads(linear(ca.q, x), H)
    k = _heads(linear(ca.k, ctx), H)
    v = _heads(linear(ca.v, ctx), H)
    if q_angles is not None:
        q = rope_complex(q, q_angles)
    if k_angles is not None:
        k = rope_complex(k, k_angles)
    o, _ = attention(q, k, v)
    return x + sign * linear(ca.out, o)


def _temporal(plan):
    idx = np.asarray(plan.indices).copy()
    idx[:, 1:] = 0
    return rope_angles(idx, plan.head_dim, plan.axis_split, plan.base, plan.temporal_scale)


def backbone_forward(bb, video, audio, text_v, text_a, c_v, c_a, v_plan, a_plan, t_plan=None,
                     video_mask=None):
    """Straight-line twin-branch forward on plain arrays; plans give RoPE indices."""
    ident = lambda n: np.zeros((n, v_plan.head_dim // 2))
    t_ang = plan_angles(t_plan) if t_plan is not None else ident(len(text_v))
    v_ang = np.concatenate([plan_angles(v_plan), t_ang])
    a_ang = np.concatenate([plan_angles(a_plan), t_ang])
    v_temp, a_temp = _temporal(v_plan), _temporal(a_plan)
    nv, na = len(video), len(audio)
    for vl, al, av in zip(bb.video_layers, bb.audio_layers, bb.av_layers):
        if vl.dual:
            v1, tv1 = dual_attend(vl.block, video, text_v, c_v, v_ang, video_mask)
            a1, ta1 = dual_attend(al.block, audio, text_a, c_a, a_ang)
        else:
            hv = single_attend(vl.block, np.concatenate([video, text_v]), c_v, v_ang, video_mask)
            ha = single_attend(al.block, np.concatenate([audio, text_a]), c_a, a_ang)
            v1, tv1 = hv[:nv], hv[nv:]
            a1, ta1 = ha[:na], ha[na:]
        v1 = cross_attention(vl.text_xattn, v1, text_v)
        if al.text_xattn is not None:
            a1 = cross_attention(al.text_xattn, a1, text_a)
        a1 = cross_attention(av.audio_from_video, a1, v1, a_temp, v_temp)
        v1 = cross_attention(av.video_from_audio, v1, a1, v_temp, a_temp)
        if vl.dual:
            video, text_v = dual_mlp(vl.block, v1, tv1, c_v)
            audio, text_a = dual_mlp(al.block, a1, ta1, c_a)
        else:
            hv = single_mlp(vl.block, np.concatenate([v1, tv1]), c_v)
            ha = single_mlp(al.block, np.concatenate([a1, ta1]), c_a)
            video, text_v = hv[:nv], hv[nv:]
            audio, text_a = ha[:na], ha[na:]
    return video, audio


def timestep_embed(emb, t):
    half = emb.feature_dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    feats = np.concatenate([np.cos(1000.0 * t * freqs), np.sin(1000.0 * t * freqs)])
    feats = np.pad(feats, (0, emb.feature_dim - 2 * half))[None, :]
    return linear(emb.fc2, silu(linear(emb.fc1, feats)))


def head_forward(head, h, c):
    shift, scale = np.split(linear(head.modulation, silu(c)), 2, axis=1)
    return linear(head.linear, layer_norm(h, head.cfg.ln_eps) * (1 + scale) + shift)


class _Plan:
    def __init__(self, head_dim, indices, axis_split, base, temporal_scale=1.0):
        self.head_dim, self.indices, self.axis_split = head_dim, np.asarray(indices), axis_split
        self.base, self.temporal_scale = base, temporal_scale


def model_forward(model, z_v_t, z_a_t, t, cond, video_mask=None):
    """Whole-model reference: channel assembly, reference prepending, backbone, heads."""
    from ..rope import default_axis_split
    cfg = model.cfg
    T, H, W, C = z_v_t.shape
    M = cond.mask
    I = np.where(M == 1, cond.cond_frames, cond.black)
    z_in = np.concatenate([z_v_t, I, M], axis=-1)
    split = default_axis_split(cfg.head_dim)
    refs = cond.references
    vis, aud = [], []
    if refs:
        for lat, tag in zip(refs.latents, refs.tags):
            if tag == "audio":
                aud.append(lat)
                continue
            f, h, w, _ = lat.shape
            pad = np.empty((f, H, W, C))
            pad[...] = cond.black
            top, left = (H - h) // 2, (W - w) // 2
            pad[:, top:top + h, left:left + w] = lat
            vis.append(np.concatenate([pad, pad, np.ones((f, H, W, 1))], axis=-1))
    nv = sum(r.shape[0] for r in vis)
    frames = list(range(-nv, T))
    tt, hh, ww = np.meshgrid(frames, np.arange(H), np.arange(W), indexing="ij")
    v_plan = _Plan(cfg.head_dim, np.stack([tt.ravel(), hh.ravel(), ww.ravel()], 1), split, cfg.rope_base)
    L = z_a_t.shape[0]
    na = sum(r.shape[0] for r in aud)
    a_idx = np.zeros((na + L, 3))
    a_idx[:, 0] = np.arange(-na, L)
    a_plan = _Plan(cfg.head_dim, a_idx, split, cfg.rope_base, T / L)
    z_attn = np.concatenate(vis + [z_in]) if vis else z_in
    a_tok = np.concatenate(aud + [z_a_t]) if aud else z_a_t
    video = linear(model.video_in, z_attn.reshape(-1, z_in.shape[-1]))
    audio = linear(model.audio_in, a_tok)
    text_v = linear(model.text_v, cond.text)
    text_a = linear(model.text_a, cond.text)
    t_plan = None
    if cfg.text_rope:
        idx = np.zeros((len(cond.text), 3))
        idx[:, 0] = np.arange(len(cond.text))
        t_plan = _Plan(cfg.head_dim, idx, split, cfg.rope_base)
    c_v, c_a = timestep_embed(model.time_v, t), timestep_embed(model.time_a, t)
    hv, ha = backbone_forward(model.backbone, video, audio, text_v, text_a, c_v, c_a,
                              v_plan, a_plan, t_plan, video_mask)
    pred_v = head_forward(model.video_head, hv[nv * H * W:], c_v).reshape(T, H, W, -1)
    pred_a = head_forward(model.audio_head, ha[na:], c_a)
    return pred_v, pred_a


def task_flags_table(kind: str, T: int, k: int | None = None) -> list[int]:
    """Per-frame condition flags written out case by case."""
    if kind == "t2v":
        return [0] * T
    if kind == "i2v":
        return [1] + [0] * (T - 1)
    if kind == "extend":
        return [1 if i < k else 0 for i in range(T)]
    if kind == "startend":
        return [1] + [0] * (T - 2) + [1]
    raise ValueError(kind)


def upsample_separable(low: np.ndarray, target) -> np.ndarray:
    """Corner-aligned linear interpolation applied one axis at a time with np.interp."""
    out = np.asarray(low, dtype=np.float64)
    for axis, n_out in enumerate(target):
        n_in = out.shape[axis]
        x_new = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
        out = np.apply_along_axis(lambda col: np.interp(x_new, np.arange(n_in), col), axis, out)
    return out


def fine_flops_enumerated(plan, heads: int, head_dim: int) -> int:
    """4 * d * H * sum over selected (query cube, key cube) of |a| * |b|, counted pair by pair."""
    sizes = [len(c) for c in plan.cubes.members]
    total = 0
    for a, sel in enumerate(plan.selection):
        for b in sel:
            total += sizes[a] * sizes[b]
    return 4 * head_dim * heads * total
