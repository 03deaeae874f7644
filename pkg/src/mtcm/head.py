"""Target scoring, mask prediction and the training loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor, _sigmoid as _sigmoid_np

LAMBDA_BCE = 2.0
LAMBDA_DICE = 5.0


@dataclass
class HeadParams:
    m1: Tensor  # mask-embedding MLP, C -> C -> C
    c1: Tensor
    m2: Tensor
    c2: Tensor
    score: Tensor  # target-scoring projection, C -> C

    def named(self):
        return dict(m1=self.m1, c1=self.c1, m2=self.m2, c2=self.c2, score=self.score)


def init_head(rng, channels) -> HeadParams:
    p = lambda a: Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
    s = 1.0 / np.sqrt(channels)
    return HeadParams(
        m1=p(rng.normal(0, s, (channels, channels))), c1=p(np.zeros(channels)),
        m2=p(rng.normal(0, s, (channels, channels))), c2=p(np.zeros(channels)),
        score=p(np.eye(channels) + rng.normal(0, 0.1 * s, (channels, channels))),
    )


def mask_embedding(q, p: HeadParams) -> Tensor:
    return tn.relu(tn.as_tensor(q) @ p.m1 + p.c1) @ p.m2 + p.c2


def target_scores(q_hat, s_e, p: HeadParams) -> Tensor:
    """Logits [..., T, N]: projected query dotted with the mean language row, over sqrt(C)."""
    q_hat, s_e = tn.as_tensor(q_hat), tn.as_tensor(s_e)
    *lead, t_len, n, c = q_hat.shape
    pooled = s_e.mean(axis=-2).reshape(*lead, c, 1)
    proj = (q_hat @ p.score).reshape(*lead, t_len * n, c)
    return (proj @ pooled).reshape(*lead, t_len, n) * (1.0 / np.sqrt(c))


def predict_mask(q_hat, pixel_features, p: HeadParams) -> Tensor:
    """Mask probabilities [T, N, G, G] from per-frame mask embeddings."""
    q_hat, pix = tn.as_tensor(q_hat), tn.as_tensor(pixel_features)
    t_len, g, _, c = pix.shape
    emb = mask_embedding(q_hat, p)  # [T, N, C]
    flat = pix.reshape(t_len, g * g, c)
    logits = emb @ flat.swapaxes(-1, -2)  # [T, N, G*G]
    return tn.sigmoid(logits.reshape(t_len, q_hat.shape[-2], g, g))


def slot_mask_logits(emb, codes, cover_onehot, pixel_pos, w_pix, b_pix) -> Tensor:
    """Mask logits [B, T, P] for one embedding per frame, without materializing
    the [B, T, P, C] pixel features.

    Each pixel's raw code is its cover code plus a shared coordinate code, so
    ``emb . (raw @ W + b)`` splits into a per-cover term and a per-pixel term.
    ``emb`` is [B, T, C], ``codes`` [B, M, C], ``cover_onehot`` [B, T, P, M],
    ``pixel_pos`` [P, C].
    """
    emb = tn.as_tensor(emb)
    b, t_len, c = emb.shape
    u = emb @ w_pix.swapaxes(0, 1)  # [B, T, C]
    bias = emb @ b_pix.reshape(c, 1)  # [B, T, 1]
    m = codes.shape[-2]
    per_code = (tn.as_tensor(codes) @ u.swapaxes(-1, -2)).swapaxes(-1, -2)  # [B, T, M]
    per_code = per_code + tn.broadcast_to(bias, (b, t_len, m))
    cover_term = tn.as_tensor(cover_onehot) @ per_code.reshape(b, t_len, m, 1)
    pos_term = tn.as_tensor(pixel_pos) @ u.reshape(b, t_len, c, 1)
    return (cover_term + pos_term).reshape(b, t_len, -1)


@dataclass
class Supervision:
    """Per-frame targets for one batch: [B, T] slots, [B, T] visibility, [B, T, P] masks."""

    slots: np.ndarray
    visible: np.ndarray
    masks: np.ndarray


@dataclass
class LossParts:
    total: Tensor
    ce: float
    bce: float
    dice: float


def total_loss(logits, mask_logits, sup: Supervision) -> LossParts:
    """Cross-entropy over queries on visible frames plus weighted BCE and Dice
    on the supervised slot's mask. Scenes are averaged with equal weight.

    ``logits`` is [B, T, N]; ``mask_logits`` [B, T, P] belong to ``sup.slots``.
    Frames with no visible target only contribute to the mask terms (as empty
    masks).
    """
    logits, mask_logits = tn.as_tensor(logits), tn.as_tensor(mask_logits)
    b, t_len, n = logits.shape
    vis = np.asarray(sup.visible, dtype=bool)
    logp = tn.log_softmax_axis(logits, -1)
    bi, ti = np.nonzero(vis)
    picked = logp[bi, ti, np.asarray(sup.slots)[bi, ti]]
    # weight each visible frame by 1 / (visible frames of its scene)
    per_scene = vis.sum(axis=1)
    w = 1.0 / (np.maximum(per_scene[bi], 1) * max(int((per_scene > 0).sum()), 1))
    ce = -(picked * tn.Tensor(w)).sum() if len(bi) else tn.Tensor(0.0)

    y = np.asarray(sup.masks, dtype=np.float64)
    bce_map = tn.softplus(mask_logits) - mask_logits * tn.Tensor(y)
    bce = bce_map.mean()
    prob = tn.sigmoid(mask_logits)
    inter = (prob * tn.Tensor(y)).sum(axis=-1)
    denom = prob.sum(axis=-1) + tn.Tensor(y.sum(axis=-1) + 1.0)
    dice = (1.0 - (inter * 2.0 + 1.0) / denom).mean()

    total = ce + bce * LAMBDA_BCE + dice * LAMBDA_DICE
    return LossParts(total=total, ce=ce.item(), bce=bce.item(), dice=dice.item())
