import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mtcm import evaluate as ev
from mtcm import synth
from mtcm.metrics import boundary_f, query_consistency, region_j

G = 32


def square(x0, y0, size=6, g=G):
    m = np.zeros((g, g), dtype=bool)
    m[y0:y0 + size, x0:x0 + size] = True
    return m


def ref_boundary(mask):
    """Pixels of the mask with a 4-neighbour outside the mask or the grid."""
    g = mask.shape[0]
    out = np.zeros_like(mask)
    for y in range(g):
        for x in range(mask.shape[1]):
            if not mask[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < g and 0 <= xx < mask.shape[1]) or not mask[yy, xx]:
                    out[y, x] = True
    return out


def ref_boundary_f(pred, gt, r=1):
    """Exhaustive pixel-distance matching."""
    bp, bg = np.argwhere(ref_boundary(pred)), np.argwhere(ref_boundary(gt))
    if len(bp) == 0 and len(bg) == 0:
        return 1.0
    if len(bp) == 0 or len(bg) == 0:
        return 0.0
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    prec = (d.min(axis=1) <= r).mean()
    rec = (d.min(axis=0) <= r).mean()
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


# ---------------------------------------------------------------- region_j

def test_region_j_cases():
    a = square(4, 4)
    assert region_j(a, a) == 1.0
    assert region_j(a, square(20, 20)) == 0.0
    p, g = np.zeros((1, 3), bool), np.zeros((1, 3), bool)
    p[0, :2] = True
    g[0, 1:] = True
    assert region_j(p, g) == pytest.approx(1 / 3)
    assert region_j(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_region_j_grid_mismatch():
    with pytest.raises(ValueError):
        region_j(np.zeros((4, 4)), np.zeros((5, 5)))


# ---------------------------------------------------------------- boundary_f

def test_boundary_f_cases():
    a = square(4, 4)
    assert boundary_f(a, a) == 1.0
    assert boundary_f(np.zeros_like(a), a) == 0.0
    assert boundary_f(a, np.zeros_like(a)) == 0.0
    assert boundary_f(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(ValueError):
        boundary_f(a, a, tolerance=-1)
    with pytest.raises(ValueError):
        boundary_f(a, a[:-1])


@pytest.mark.parametrize("dx,dy", [(1, 0), (-1, 0), (0, 1), (0, -1)])
def test_one_pixel_shift_is_within_tolerance(dx, dy):
    a, b = square(10, 10), square(10 + dx, 10 + dy)
    assert ref_boundary_f(a, b) == 1.0
    assert boundary_f(a, b, tolerance=1) == 1.0
    assert boundary_f(a, b, tolerance=0) < 1.0


def test_symmetry_on_stated_cases():
    a, b = square(4, 4), square(20, 20)
    for f in (region_j, boundary_f):
        assert f(a, a) == 1.0
        assert f(a, b) == f(b, a) == 0.0


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.bool_, (10, 10)), hnp.arrays(np.bool_, (10, 10)), st.integers(0, 2))
def test_boundary_f_matches_exhaustive_oracle(pred, gt, r):
    assert boundary_f(pred, gt, tolerance=r) == pytest.approx(ref_boundary_f(pred, gt, r), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.bool_, (8, 8)), hnp.arrays(np.bool_, (8, 8)))
def test_metrics_in_unit_interval(pred, gt):
    for v in (region_j(pred, gt), boundary_f(pred, gt)):
        assert 0.0 <= v <= 1.0


# ---------------------------------------------------------------- query_consistency

def test_query_consistency_cases():
    ident = np.tile(np.arange(4), (5, 1))
    perms = np.tile(np.arange(4), (5, 1))
    assert query_consistency(perms, ident) == 1.0
    bad = perms.copy()
    bad[3] = [1, 2, 3, 0]  # one frame of t in [2, 5] fully misassigned
    assert query_consistency(bad, ident) == 0.75
    with pytest.raises(ValueError):
        query_consistency(perms[:1], ident[:1])


def test_query_consistency_ignores_absent_objects():
    ident = np.tile(np.arange(3), (3, 1))
    perms = np.array([[0, 1, 2], [0, 1, 2], [0, 2, 1]])
    present = np.ones((3, 3), bool)
    present[:, 2] = False
    present[:, 1] = [True, True, False]
    # frame 2 swaps objects 1 and 2; 1 is gone there and 2 never exists
    assert query_consistency(perms, ident, present) == 1.0


def test_query_consistency_random_is_one_over_n():
    r = np.random.default_rng(0)
    n, vals = 8, []
    for _ in range(10_000):
        perms = np.stack([r.permutation(n) for _ in range(2)])
        vals.append(query_consistency(perms, np.tile(np.arange(n), (2, 1))))
    assert abs(np.mean(vals) - 1 / n) < 0.01


# ---------------------------------------------------------------- evaluation

@pytest.fixture(scope="module")
def arrays():
    cb = synth.Codebook(synth.CodebookConfig())
    cfg = synth.SceneConfig()
    return [synth.scene_arrays(synth.generate_scene(cfg, s), cb) for s in range(12)]


def gt_masks(a):
    t_len = a.gt.shape[0]
    return a.gt.reshape(t_len, G, G) > 0.5


def test_ground_truth_predictions_score_one(arrays):
    rep = ev.evaluate_predictions([gt_masks(a) for a in arrays], arrays)
    assert rep.J == rep.F == rep.JF == 1.0


def test_empty_predictions_score_near_zero(arrays):
    # appears-midway targets score empty frames as correct, so keep always-visible targets
    shown = [a for a in arrays if a.visible.all()]
    assert len(shown) >= 6
    rep = ev.evaluate_predictions([np.zeros_like(gt_masks(a)) for a in shown], shown)
    assert rep.JF < 0.05


def test_report_means_are_arithmetic_means(arrays):
    r = np.random.default_rng(1)
    preds = [gt_masks(a) & (r.uniform(size=gt_masks(a).shape) < 0.7) for a in arrays]
    rep = ev.evaluate_predictions(preds, arrays)
    for key in ("J", "F"):
        assert getattr(rep, key) == pytest.approx(np.mean([s[key] for s in rep.scenes]), abs=1e-15)
    assert rep.JF == (rep.J + rep.F) / 2
    for s in rep.scenes:
        assert s["JF"] == (s["J"] + s["F"]) / 2


def test_select_slot_uses_time_mean():
    assert ev.select_slot(np.array([[5.0, 0.0], [-9.0, 1.0], [0.0, 1.0]])) == 1
    # per-frame majority would pick slot 1; the time mean picks slot 0
    assert ev.select_slot(np.array([[9.0, 0.0], [0.0, 1.0], [0.0, 1.0]])) == 0


def test_eval_of_hundred_scenes_is_fast():
    from mtcm import pipeline as pl
    cb = synth.Codebook(synth.CodebookConfig())
    cfg = synth.SceneConfig()
    data = [synth.scene_arrays(synth.generate_scene(cfg, 10**6 + s), cb) for s in range(100)]
    model = pl.Model(pl.ModelConfig(), cb)
    t0 = time.perf_counter()
    rep = ev.evaluate_model(model, data)
    assert time.perf_counter() - t0 < 60
    assert len(rep.scenes) == 100 and not rep.has_nan()
