import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from argossm import ice


def enumerate_loglik(e, avail, p_mar):
    """Brute force over all 4^N paths of S (index 0 drawn from the initial belief)."""
    n = len(avail)
    init = ice.initial_belief(avail[0])
    total = 0.0
    for path in itertools.product(range(4), repeat=n):
        pr = init[path[0]]
        for i in range(1, n):
            T = ice.transition_matrix(e[i])
            pr *= T[path[i - 1], path[i]] * ice.availability_probs(avail[i], p_mar)[path[i]]
            if pr == 0:
                break
        total += pr
    return np.log(total)


def enumerate_paths(e, avail, p_mar):
    n = len(avail)
    init = ice.initial_belief(avail[0])
    probs = {}
    for path in itertools.product(range(4), repeat=n):
        pr = init[path[0]]
        for i in range(1, n):
            pr *= ice.transition_matrix(e[i])[path[i - 1], path[i]] * ice.availability_probs(avail[i], p_mar)[path[i]]
        if pr > 0:
            probs[path] = pr
    z = sum(probs.values())
    return {k: v / z for k, v in probs.items()}


def test_detect_prob_formulas():
    assert ice.detect_prob(0.5, 0.9, 0.8) == pytest.approx((0.9 + 0.2) * 0.5)
    assert ice.detect_prob(0.5, 0.9, 0.8, "complement") == pytest.approx(0.9 * 0.5 + 0.2 * 0.5)
    assert ice.detect_prob(0.0, 0.9, 0.8) == 0.0
    assert ice.detect_prob(0.0, 0.9, 0.8, "complement") == pytest.approx(0.2)
    # paper form can exceed 1 and is clamped
    assert ice.detect_prob(1.0, 0.9, 0.5) == 1.0
    with pytest.raises(ValueError):
        ice.detect_prob(0.5, 0.9, 0.9, "other")


def test_transition_rows_and_structure():
    T = ice.transition_matrix(0.3)
    assert np.allclose(T.sum(axis=1), 1.0)
    assert np.allclose(T[:, 0], 0.3)
    assert T[2, 3] == pytest.approx(0.7) and T[3, 3] == pytest.approx(0.7)
    assert T[0, 2] == 0 and T[1, 3] == 0


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4).filter(lambda b: sum(b) > 0), st.floats(0, 1))
def test_step_belief_matches_matrix(b, e):
    b = np.array(b) / sum(b)
    assert np.allclose(ice.step_belief(b, e), b @ ice.transition_matrix(e), atol=1e-14)
    assert ice.step_belief(b, e).sum() == pytest.approx(1.0)


def test_availability_blocks_surfacing_below_three():
    ll, post = ice.availability_loglik(np.array([0.5, 0.5, 0, 0]), True, 0.1)
    assert ll == -np.inf
    assert np.allclose(post, [0.5, 0.5, 0, 0])
    ll, post = ice.availability_loglik(np.array([0.25] * 4), True, 0.1)
    assert ll == pytest.approx(np.log(0.25 * 0.9))
    assert np.allclose(post, [0, 0, 0, 1])


def test_initial_belief():
    assert np.allclose(ice.initial_belief(True), [0, 0, 0, 1])
    assert np.allclose(ice.initial_belief(False), 0.25)


def test_forward_matches_enumeration_n8():
    rng = np.random.default_rng(4)
    for _ in range(5):
        e = rng.uniform(0, 0.6, 8)
        avail = rng.random(8) < 0.5
        avail[0] = True
        _, ll = ice.forward_beliefs(e, avail, 0.15)
        ref = enumerate_loglik(e, avail, 0.15)
        if np.isfinite(ref):
            assert abs(ll - ref) < 1e-10
        else:
            assert ll == -np.inf


def test_forward_batches_over_paths():
    rng = np.random.default_rng(0)
    e = rng.uniform(0, 0.5, (3, 6))
    avail = np.array([1, 0, 0, 0, 1, 1], bool)
    b, ll = ice.forward_beliefs(e, avail, 0.1)
    for i in range(3):
        bi, lli = ice.forward_beliefs(e[i], avail, 0.1)
        assert np.allclose(b[i], bi) and ll[i] == pytest.approx(lli)


def test_backward_messages_give_likelihood():
    rng = np.random.default_rng(1)
    e = rng.uniform(0, 0.5, 7)
    avail = np.array([1, 0, 0, 0, 1, 0, 1], bool)
    beta = ice.backward_messages(e, avail, 0.2)
    _, ll = ice.forward_beliefs(e, avail, 0.2)
    assert np.log(ice.initial_belief(True) @ beta[0]) == pytest.approx(ll, abs=1e-12)


def test_sample_paths_match_enumeration_n4():
    e = np.array([0.0, 0.4, 0.2, 0.3])
    avail = np.array([1, 0, 0, 0], bool)
    probs = enumerate_paths(e, avail, 0.2)
    n = 20000
    paths = ice.sample_s_path(e, avail, 0.2, np.random.default_rng(3), n_draws=n)
    keys, counts = np.unique(paths, axis=0, return_counts=True)
    seen = {tuple(k): c for k, c in zip(keys, counts)}
    assert set(seen) <= set(probs)
    for k, p in probs.items():
        se = np.sqrt(p * (1 - p) / n)
        assert abs(seen.get(k, 0) / n - p) < 3 * se + 1e-12


def test_sample_path_respects_availability():
    e = np.full(10, 0.3)
    avail = np.array([1, 0, 0, 1, 0, 0, 0, 0, 1, 1], bool)
    paths = ice.sample_s_path(e, avail, 0.1, np.random.default_rng(0), n_draws=200)
    assert np.all(paths[:, avail] == 3)


def test_impossible_sequence_raises():
    e = np.zeros(3)
    avail = np.array([1, 0, 1], bool)
    # without detections S stays at 3, so a missing fix needs pMAR > 0
    with pytest.raises(ValueError):
        ice.sample_s_path(e, avail, 0.0, np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_beliefs_stay_on_simplex(seed):
    rng = np.random.default_rng(seed)
    n = 12
    e = rng.uniform(0, 1, n)
    avail = rng.random(n) < 0.3
    b, _ = ice.forward_beliefs(e, avail, 0.3)
    assert np.all(b >= -1e-15)
    assert np.allclose(b.sum(axis=-1), 1.0)
