"""Region similarity J, boundary accuracy F, and query consistency."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

BOUNDARY_TOLERANCE = 1  # pixels, for a 32x32 grid

_CROSS = ndimage.generate_binary_structure(2, 1)


def _check(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask grids differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def region_j(pred, gt) -> float:
    """Intersection over union; two empty masks score 1."""
    pred, gt = _check(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary(mask):
    """Mask pixels removed by a 4-connected erosion (grid edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def disk(r):
    r = int(r)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def boundary_f(pred, gt, tolerance=BOUNDARY_TOLERANCE) -> float:
    """Contour F-measure with boundary matches allowed within ``tolerance`` pixels."""
    pred, gt = _check(pred, gt)
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    bp, bg = boundary(pred), boundary(gt)
    np_, ng = bp.sum(), bg.sum()
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    fp = disk(tolerance)
    gt_near = ndimage.binary_dilation(bg, structure=fp) if tolerance > 0 else bg
    pred_near = ndimage.binary_dilation(bp, structure=fp) if tolerance > 0 else bp
    precision = (bp & gt_near).sum() / np_
    recall = (bg & pred_near).sum() / ng
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def query_consistency(perms, identity, present=None) -> float:
    """Fraction of (frame, object) pairs whose aligned slot matches frame 0's.

    ``perms`` and ``identity`` are [T, N]: aligned slot j of frame t holds
    identity ``identity[t, perms[t, j]]``. ``present`` is an optional [T, N]
    boolean table indexed by identity; only identities present in both frame
    0 and frame t are counted. Returns 1.0 when nothing is countable.
    """
    perms = np.asarray(perms)
    identity = np.asarray(identity)
    t_len, n = perms.shape
    if t_len < 2:
        raise ValueError("query consistency needs at least two frames")
    objs = np.take_along_axis(identity, perms, axis=-1)
    slot_of = np.empty((t_len, n), dtype=np.int64)
    for t in range(t_len):
        slot_of[t, objs[t]] = np.arange(n)
    if present is None:
        present = np.ones((t_len, n), dtype=bool)
    present = np.asarray(present, dtype=bool)
    hit = total = 0
    for t in range(1, t_len):
        both = present[0] & present[t]
        total += int(both.sum())
        hit += int((both & (slot_of[t] == slot_of[0])).sum())
    return 1.0 if total == 0 else hit / total


def presence_table(scene_present, n_queries):
    """[K, T] object presence -> [T, N] identity presence (empty identities False)."""
    k, t_len = scene_present.shape
    out = np.zeros((t_len, n_queries), dtype=bool)
    out[:, :k] = scene_present.T
    return out
