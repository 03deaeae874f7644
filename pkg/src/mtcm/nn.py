"""Attention, feed-forward and temporal convolution blocks.

All functions accept arbitrary leading batch dimensions; the trailing axes are
the ones named in each signature.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor


@dataclass
class MhaParams:
    """Multi-head attention weights.

    ``wq``/``wk``/``wv`` are [C, C] with head h owning columns
    ``h*C/H:(h+1)*C/H``. ``norm_gain``/``norm_bias`` are only used by the
    pre-norm wrappers (:func:`cross_attn`, :func:`self_attn_axis`).
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int = 4
    norm_gain: Tensor | None = None
    norm_bias: Tensor | None = None

    def __post_init__(self):
        c = self.wq.shape[0]
        if c % self.heads:
            raise ValueError(f"channels {c} not divisible by heads {self.heads}")

    def named(self):
        out = {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}
        if self.norm_gain is not None:
            out["norm_gain"] = self.norm_gain
            out["norm_bias"] = self.norm_bias
        return out


@dataclass
class FfnParams:
    norm_gain: Tensor
    norm_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self):
        return dict(norm_gain=self.norm_gain, norm_bias=self.norm_bias,
                    w1=self.w1, b1=self.b1, w2=self.w2, b2=self.b2)


@dataclass
class ConvParams:
    kernel: Tensor  # [k, C_in, C_out]
    bias: Tensor  # [C_out]

    def __post_init__(self):
        if self.kernel.shape[0] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel.shape[0]}")

    def named(self):
        return {"kernel": self.kernel, "bias": self.bias}


def _param(a, name=None):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, name=name)


def init_mha(rng, channels, heads=4, prenorm=True, out_scale=0.5):
    s = 1.0 / np.sqrt(channels)
    return MhaParams(
        wq=_param(rng.normal(0, s, (channels, channels))),
        wk=_param(rng.normal(0, s, (channels, channels))),
        wv=_param(rng.normal(0, s, (channels, channels))),
        wo=_param(rng.normal(0, s * out_scale, (channels, channels))),
        heads=heads,
        norm_gain=_param(np.ones(channels)) if prenorm else None,
        norm_bias=_param(np.zeros(channels)) if prenorm else None,
    )


def init_ffn(rng, channels, hidden_mult=4, out_scale=0.5):
    hidden = hidden_mult * channels
    return FfnParams(
        norm_gain=_param(np.ones(channels)),
        norm_bias=_param(np.zeros(channels)),
        w1=_param(rng.normal(0, 1.0 / np.sqrt(channels), (channels, hidden))),
        b1=_param(np.zeros(hidden)),
        w2=_param(rng.normal(0, out_scale / np.sqrt(hidden), (hidden, channels))),
        b2=_param(np.zeros(channels)),
    )


def init_conv(rng, channels, kernel_size=3, noise=0.02):
    if kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kernel_size}")
    k = rng.normal(0, noise / np.sqrt(channels), (kernel_size, channels, channels))
    k[kernel_size // 2] += np.eye(channels)
    return ConvParams(kernel=_param(k), bias=_param(np.zeros(channels)))


# ---------------------------------------------------------------------------

def layer_norm(x, gain, bias) -> Tensor:
    x = tn.as_tensor(x)
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs at least two channels")
    return tn.normalize_last(x) * gain + bias


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, c = x.shape
    return x.reshape(*lead, n, heads, c // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * d)


def attention_weights(q, k, p: MhaParams) -> Tensor:
    """Per-head attention weights [..., H, A, B]."""
    q, k = tn.as_tensor(q), tn.as_tensor(k)
    c = p.wq.shape[0]
    if q.shape[-1] != c or k.shape[-1] != c:
        raise ValueError(f"channel mismatch: q {q.shape}, k {k.shape}, params C={c}")
    qh = _split_heads(q @ p.wq, p.heads)
    kh = _split_heads(k @ p.wk, p.heads)
    scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(c // p.heads))
    return tn.softmax_axis(scores, -1)


def mha(q, k, v, p: MhaParams) -> Tensor:
    """Scaled dot-product multi-head attention, [..., A, C] x [..., B, C] -> [..., A, C]."""
    v = tn.as_tensor(v)
    k = tn.as_tensor(k)
    if v.shape[-1] != p.wv.shape[0] or v.shape[-2] != k.shape[-2]:
        raise ValueError(f"key/value mismatch: k {k.shape}, v {v.shape}")
    w = attention_weights(q, k, p)
    vh = _split_heads(v @ p.wv, p.heads)
    return _merge_heads(w @ vh) @ p.wo


def rca(d, q, k, v, p: MhaParams) -> Tensor:
    """Referring cross attention: ``d + mha(q, k, v)``, no normalization."""
    d = tn.as_tensor(d)
    shapes = {tn.as_tensor(t).shape for t in (d, q, k, v)}
    if len(shapes) != 1:
        raise ValueError(f"rca inputs must share a shape, got {sorted(shapes)}")
    return d + mha(q, k, v, p)


def cross_attn(x, ctx, p: MhaParams) -> Tensor:
    """Pre-norm residual cross attention of ``x`` over ``ctx``."""
    x, ctx = tn.as_tensor(x), tn.as_tensor(ctx)
    if x.shape[-1] != ctx.shape[-1]:
        raise ValueError(f"cross_attn channel mismatch: {x.shape} vs {ctx.shape}")
    return x + mha(layer_norm(x, p.norm_gain, p.norm_bias), ctx, ctx, p)


def ffn(x, p: FfnParams) -> Tensor:
    x = tn.as_tensor(x)
    h = tn.relu(layer_norm(x, p.norm_gain, p.norm_bias) @ p.w1 + p.b1)
    return x + (h @ p.w2 + p.b2)


def conv1d_time(x, p: ConvParams) -> Tensor:
    """Zero-padded, length-preserving convolution along axis -2 of [..., T, C_in]."""
    x = tn.as_tensor(x)
    ks = p.kernel.shape[0]
    t = x.shape[-2]
    half = ks // 2
    xp = tn.pad_axis(x, -2, half, half)
    out = None
    for j in range(ks):
        term = xp[..., j:j + t, :] @ p.kernel[j]
        out = term if out is None else out + term
    return out + p.bias


def self_attn_axis(cube, axis: str, p: MhaParams) -> Tensor:
    """Pre-norm residual self attention over the time or instance axis of [..., T, N, C]."""
    cube = tn.as_tensor(cube)
    if axis == "time":
        x = cube.swapaxes(-2, -3)
    elif axis == "instance":
        x = cube
    else:
        raise ValueError(f"unknown attention axis {axis!r}")
    h = layer_norm(x, p.norm_gain, p.norm_bias)
    y = x + mha(h, h, h, p)
    return y.swapaxes(-2, -3) if axis == "time" else y
