"""Full model: proxy encoder -> [Aligner] -> [MCE] -> head, on batches of scenes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import head as hd
from . import model as mm
from . import synth
from . import tensor as tn
from .tensor import Tensor


@dataclass
class ModelConfig:
    mtcm: mm.MtcmConfig = field(default_factory=mm.MtcmConfig)
    use_aligner: bool = True
    use_mce: bool = True
    noise: float = 0.05
    seed: int = 0


class Model:
    """Parameters of every stage plus the module switches."""

    GROUPS = ("proxy", "head", "aligner", "mce")

    def __init__(self, cfg: ModelConfig, codebook: synth.Codebook):
        if codebook.cfg.channels != cfg.mtcm.channels:
            raise ValueError("codebook and model channel widths differ")
        self.cfg = cfg
        self.codebook = codebook
        rng = np.random.default_rng(cfg.seed)
        self.proxy = synth.init_proxy(codebook, cfg.noise)
        self.head = hd.init_head(rng, cfg.mtcm.channels)
        self.mtcm = mm.init_mtcm(cfg.mtcm, cfg.seed + 1)

    @property
    def use_aligner(self):
        return self.cfg.use_aligner

    @property
    def use_mce(self):
        return self.cfg.use_mce

    def groups(self) -> dict:
        """{group: {name: Tensor}} in a fixed order."""
        named = self.mtcm.named_parameters()
        return {
            "proxy": {f"proxy.{k}": v for k, v in self.proxy.named().items()},
            "head": {f"head.{k}": v for k, v in self.head.named().items()},
            "aligner": {k: v for k, v in named.items() if k.startswith("aligner.")},
            "mce": {k: v for k, v in named.items() if k.startswith("mce.")},
        }

    def named_parameters(self) -> dict:
        out = {}
        for g in self.groups().values():
            out.update(g)
        return out

    def set_trainable(self, groups):
        groups = set(groups)
        for name, params in self.groups().items():
            for p in params.values():
                p.requires_grad = name in groups


@dataclass
class Batch:
    arrays: list  # SceneArrays per scene

    def stack(self, attr):
        return np.stack([getattr(a, attr) for a in self.arrays])

    def __len__(self):
        return len(self.arrays)


def encode_batch(model: Model, batch: Batch):
    """Tokens [B, T, N, C] and language rows [B, L, C]."""
    tokens = synth.tokens_from_arrays(batch.stack("raw_tokens"), batch.stack("null_mask"),
                                      batch.stack("noise"), model.proxy, model.codebook)
    s_e = synth.language_from_arrays(batch.stack("lang_raw"), model.proxy)
    return tokens, s_e


def identity_perms(b, t_len, n):
    return np.broadcast_to(np.arange(n), (b, t_len, n)).copy()


def run_temporal(model: Model, tokens, s_e, perms=None, start="tokens"):
    """Aligner and MCE as enabled. ``start="aligned"`` treats ``tokens`` as
    Aligner output already (with ``perms``) and only runs the MCE."""
    tokens = tn.as_tensor(tokens)
    b, t_len, n, _ = tokens.shape
    x = tokens
    if start == "tokens":
        if model.use_aligner:
            x, perms = mm.aligner_forward(tokens, s_e, model.mtcm, perms=perms)
        else:
            perms = identity_perms(b, t_len, n)
    if model.use_mce:
        x = mm.mce_forward(x, s_e, model.mtcm)
    return x, perms


def slot_objects(identity, perms):
    """Identity held by each aligned slot, [.., T, N]."""
    return np.take_along_axis(identity, perms, axis=-1)


def supervision(batch: Batch, perms) -> hd.Supervision:
    ident = batch.stack("identity")
    objs = slot_objects(ident, perms)
    targets = np.array([a.target for a in batch.arrays])
    slots = np.argmax(objs == targets[:, None, None], axis=-1)
    return hd.Supervision(slots=slots, visible=batch.stack("visible"), masks=batch.stack("gt"))


def mask_logits_for(model: Model, batch: Batch, q_hat, slots) -> Tensor:
    """Mask logits [B, T, P] of the query in ``slots`` [B, T] of each frame."""
    b, t_len = slots.shape
    picked = q_hat[np.arange(b)[:, None], np.arange(t_len)[None, :], slots]
    emb = hd.mask_embedding(picked, model.head)
    n = batch.arrays[0].raw_tokens.shape[1]
    cover = batch.stack("cover")
    onehot = np.eye(n + 1)[cover]
    return hd.slot_mask_logits(emb, batch.stack("codes"), onehot, model.codebook.pixel_pos,
                               model.proxy.w_pix, model.proxy.b_pix)


def forward_loss(model: Model, batch: Batch, cached=None) -> hd.LossParts:
    """Training loss on a batch.

    ``cached`` optionally holds frozen upstream outputs as
    ``(start, x, s_e, perms)`` so frozen stages are not re-evaluated.
    """
    if cached is None:
        tokens, s_e = encode_batch(model, batch)
        q_hat, perms = run_temporal(model, tokens, s_e)
    else:
        start, x, s_e, perms = cached
        if start == "final":
            q_hat = tn.as_tensor(x)
        else:
            q_hat, perms = run_temporal(model, x, s_e, perms=perms, start=start)
    s_e = tn.as_tensor(s_e)
    logits = hd.target_scores(q_hat, s_e, model.head)
    sup = supervision(batch, perms)
    masks = mask_logits_for(model, batch, q_hat, sup.slots)
    return hd.total_loss(logits, masks, sup)


def infer(model: Model, batch: Batch):
    """Untracked forward pass: logits [B, T, N], enhanced queries and perms."""
    tokens, s_e = encode_batch(model, batch)
    q_hat, perms = run_temporal(model, tokens, s_e)
    logits = hd.target_scores(q_hat, s_e, model.head)
    return logits.data, q_hat, perms
