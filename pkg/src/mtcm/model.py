"""Aligner and Multi-Context Enhancer stacks.

Token cubes are [..., T, N, C]; language features are [..., L, C] with the
same leading dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as tn
from .assignment import align_sequence
from .tensor import Tensor


@dataclass
class MtcmConfig:
    channels: int = 64
    heads: int = 4
    aligner_layers: int = 2
    mce_layers: int = 2
    kernel_size: int = 3

    @classmethod
    def paper(cls, **kw):
        """Six Aligner and six MCE blocks."""
        return cls(aligner_layers=6, mce_layers=6, **kw)


@dataclass
class AlignerBlockParams:
    rca: nn.MhaParams
    ca: nn.MhaParams
    ffn: nn.FfnParams

    def named(self):
        out = {f"rca.{k}": v for k, v in self.rca.named().items()}
        out.update({f"ca.{k}": v for k, v in self.ca.named().items()})
        out.update({f"ffn.{k}": v for k, v in self.ffn.named().items()})
        return out


@dataclass
class McEBlockParams:
    tsa: nn.MhaParams
    conv: nn.ConvParams
    isa: nn.MhaParams
    ca: nn.MhaParams

    def named(self):
        out = {}
        for part in ("tsa", "conv", "isa", "ca"):
            out.update({f"{part}.{k}": v for k, v in getattr(self, part).named().items()})
        return out


@dataclass
class MtcmState:
    config: MtcmConfig
    aligner: list = field(default_factory=list)
    mce: list = field(default_factory=list)

    def named_parameters(self):
        out = {}
        for i, blk in enumerate(self.aligner):
            out.update({f"aligner.{i}.{k}": v for k, v in blk.named().items()})
        for i, blk in enumerate(self.mce):
            out.update({f"mce.{i}.{k}": v for k, v in blk.named().items()})
        return out


def init_aligner_block(rng, cfg: MtcmConfig) -> AlignerBlockParams:
    c, h = cfg.channels, cfg.heads
    return AlignerBlockParams(
        rca=nn.init_mha(rng, c, h, prenorm=False),
        ca=nn.init_mha(rng, c, h),
        ffn=nn.init_ffn(rng, c),
    )


def init_mce_block(rng, cfg: MtcmConfig) -> McEBlockParams:
    c, h = cfg.channels, cfg.heads
    return McEBlockParams(
        tsa=nn.init_mha(rng, c, h),
        conv=nn.init_conv(rng, c, cfg.kernel_size),
        isa=nn.init_mha(rng, c, h),
        ca=nn.init_mha(rng, c, h),
    )


def init_mtcm(cfg: MtcmConfig, seed: int) -> MtcmState:
    rng = np.random.default_rng(seed)
    if cfg.aligner_layers < 1 or cfg.mce_layers < 1:
        raise ValueError("aligner_layers and mce_layers must be >= 1")
    return MtcmState(
        config=cfg,
        aligner=[init_aligner_block(rng, cfg) for _ in range(cfg.aligner_layers)],
        mce=[init_mce_block(rng, cfg) for _ in range(cfg.mce_layers)],
    )


# ------------------------------------------------------------------- Aligner

def aligner_block(i_prev_layer, i_prev_frame, o_aligned, s_e, p: AlignerBlockParams) -> Tensor:
    """One Aligner block: RCA with the previous frame as query, then CA over
    the language features and the FFN."""
    dotted = nn.rca(i_prev_layer, i_prev_frame, o_aligned, o_aligned, p.rca)
    return nn.ffn(nn.cross_attn(dotted, s_e, p.ca), p.ffn)


def align_tokens(tokens):
    """Hungarian alignment of a [T, N, C] or [B, T, N, C] token cube.

    Assignment happens on values outside the graph; the returned Tensor is a
    gather of ``tokens``, so gradients still reach the token values.
    """
    tokens = tn.as_tensor(tokens)
    data = tokens.data
    if data.ndim == 3:
        _, perms = align_sequence(data)
        t_idx = np.arange(data.shape[0])[:, None]
        return tokens[t_idx, perms], perms
    perms = np.stack([align_sequence(d)[1] for d in data])
    b_idx = np.arange(data.shape[0])[:, None, None]
    t_idx = np.arange(data.shape[1])[None, :, None]
    return tokens[b_idx, t_idx, perms], perms


def aligner_forward(tokens, s_e, state: MtcmState, perms=None):
    """Run the Aligner over all frames.

    Returns the final-layer outputs per frame (same shape as ``tokens``) and
    the alignment permutations. ``perms`` may be passed to skip re-running
    the assignment.
    """
    tokens = tn.as_tensor(tokens)
    if perms is None:
        aligned, perms = align_tokens(tokens)
    else:
        aligned = _gather(tokens, perms)
    t_len = tokens.shape[-3]
    outputs = []
    prev = aligned[..., 0, :, :]
    for t in range(t_len):
        o_t = aligned[..., t, :, :]
        x = o_t
        for blk in state.aligner:
            x = aligner_block(x, prev, o_t, s_e, blk)
        outputs.append(x)
        prev = x
    return tn.stack(outputs, axis=-3), perms


def _gather(tokens: Tensor, perms):
    if tokens.ndim == 3:
        return tokens[np.arange(tokens.shape[0])[:, None], perms]
    b_idx = np.arange(tokens.shape[0])[:, None, None]
    t_idx = np.arange(tokens.shape[1])[None, :, None]
    return tokens[b_idx, t_idx, perms]


# ----------------------------------------------------------------------- MCE

def mce_block(q_in, s_e, p: McEBlockParams) -> Tensor:
    """TSA then per-instance temporal Conv, ISA then CA over the language."""
    q_in, s_e = tn.as_tensor(q_in), tn.as_tensor(s_e)
    x = nn.self_attn_axis(q_in, "time", p.tsa)
    q_dot = nn.conv1d_time(x.swapaxes(-2, -3), p.conv).swapaxes(-2, -3)
    y = nn.self_attn_axis(q_dot, "instance", p.isa)
    # every query attends to the same language rows, so frames can share one attention call
    *lead, t_len, n, c = y.shape
    out = nn.cross_attn(y.reshape(*lead, t_len * n, c), s_e, p.ca)
    return out.reshape(*lead, t_len, n, c)


def mce_forward(i_cube, s_e, state: MtcmState) -> Tensor:
    x = tn.as_tensor(i_cube)
    for blk in state.mce:
        x = mce_block(x, s_e, blk)
    return x
