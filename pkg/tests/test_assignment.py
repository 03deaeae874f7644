import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtcm.assignment import align_sequence, assignment_cost, cosine_cost, hungarian_min


def brute_force(cost):
    n = len(cost)
    return min(assignment_cost(cost, p) for p in itertools.permutations(range(n)))


def test_cosine_cost_examples():
    np.testing.assert_allclose(cosine_cost([[1, 0], [0, 1]], [[0, 1], [1, 0]]), [[1, 0], [0, 1]])
    x = np.random.default_rng(0).normal(size=(4, 3))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    np.testing.assert_allclose(np.diag(cosine_cost(x, x)), 0.0, atol=1e-15)
    scaled = x * np.array([[2.0], [0.5], [7.0], [1e-3]])
    np.testing.assert_allclose(cosine_cost(scaled, x), cosine_cost(x, x), atol=1e-14)


def test_cosine_cost_zero_rows():
    c = cosine_cost([[0.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(c, [[1.0, 1.0], [0.0, 1.0]])


def test_hungarian_small_cases():
    assert hungarian_min([[0.1, 0.9], [0.8, 0.2]]).tolist() == [0, 1]
    anti = np.ones((4, 4)) - np.fliplr(np.eye(4))
    assert hungarian_min(anti).tolist() == [3, 2, 1, 0]
    assert hungarian_min([[5.0]]).tolist() == [0]


def test_hungarian_rejects_bad_input():
    with pytest.raises(ValueError):
        hungarian_min([[0.0, np.nan], [1.0, 0.0]])
    with pytest.raises(ValueError):
        hungarian_min(np.zeros((2, 3)))


def test_hungarian_ties_are_deterministic():
    c = np.zeros((5, 5))
    first = hungarian_min(c)
    assert all(np.array_equal(hungarian_min(c), first) for _ in range(5))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1), st.sampled_from(["normal", "int", "wide"]))
def test_hungarian_is_optimal_bijection(n, seed, kind):
    r = np.random.default_rng(seed)
    cost = {"normal": lambda: r.normal(size=(n, n)),
            "int": lambda: r.integers(0, 3, (n, n)).astype(float),
            "wide": lambda: r.uniform(-1e6, 1e6, (n, n))}[kind]()
    perm = hungarian_min(cost)
    assert sorted(perm.tolist()) == list(range(n))
    assert np.isclose(assignment_cost(cost, perm), brute_force(cost), rtol=1e-12, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(7, 20), st.integers(0, 2**32 - 1))
def test_hungarian_beats_random_permutations(n, seed):
    r = np.random.default_rng(seed)
    cost = r.uniform(size=(n, n))
    best = assignment_cost(cost, hungarian_min(cost))
    rand = min(assignment_cost(cost, r.permutation(n)) for _ in range(1000))
    assert best <= rand + 1e-12


def test_hungarian_agrees_with_scipy():
    from scipy.optimize import linear_sum_assignment
    r = np.random.default_rng(3)
    for n in (8, 15, 30):
        cost = r.normal(size=(n, n))
        rows, cols = linear_sum_assignment(cost)
        assert np.isclose(assignment_cost(cost, hungarian_min(cost)), cost[rows, cols].sum())


# ---------------------------------------------------------------- align_sequence

def shuffled(base, t_len, seed):
    """Frames whose slots are shuffled; returns tokens and the applied permutations."""
    r = np.random.default_rng(seed)
    shuffles = [np.arange(len(base))] + [r.permutation(len(base)) for _ in range(t_len - 1)]
    return np.stack([base[s] for s in shuffles]), np.stack(shuffles)


def test_align_sequence_base_case():
    x = np.random.default_rng(0).normal(size=(1, 5, 3))
    aligned, perms = align_sequence(x)
    assert np.array_equal(aligned, x)
    assert perms.tolist() == [[0, 1, 2, 3, 4]]


def test_align_sequence_constant_frames():
    base = np.random.default_rng(1).normal(size=(6, 4))
    _, perms = align_sequence(np.stack([base] * 5))
    assert np.all(perms == np.arange(6))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_align_sequence_recovers_inverse_shuffles(n, t_len, seed):
    base = np.random.default_rng(seed).normal(size=(n, 16))
    tokens, shuffles = shuffled(base, t_len, seed + 1)
    aligned, perms = align_sequence(tokens)
    for t in range(t_len):
        # slot j of aligned frame t holds base row shuffles[t][perms[t][j]], which must be j
        assert np.array_equal(shuffles[t][perms[t]], np.arange(n))
        assert np.array_equal(aligned[t], base)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_align_sequence_relabel_equivariance(n, t_len, seed):
    r = np.random.default_rng(seed)
    tokens = r.normal(size=(t_len, n, 8))
    relabel = r.permutation(n)
    a1, p1 = align_sequence(tokens[:, relabel])
    a0, p0 = align_sequence(tokens)
    # relabeling every frame's slots only relabels the frame-0 reference order
    assert np.array_equal(a1, a0[:, relabel])
    assert np.array_equal(relabel[p1], p0[:, relabel])


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_align_sequence_tolerates_small_noise(n, t_len, seed):
    r = np.random.default_rng(seed)
    base = np.eye(16)[:n] * r.uniform(0.5, 2.0, (n, 1))
    dists = np.linalg.norm(base[:, None] - base[None], axis=-1)
    sigma = 0.1 * dists[~np.eye(n, dtype=bool)].min()
    tokens, shuffles = shuffled(base, t_len, seed + 1)
    noisy = tokens + r.normal(0, sigma, tokens.shape)
    _, perms = align_sequence(noisy)
    for t in range(t_len):
        assert np.array_equal(shuffles[t][perms[t]], np.arange(n))
