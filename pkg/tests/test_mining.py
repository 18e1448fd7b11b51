import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dafe.errors import DataError, ParameterError
from dafe.mining import (Margins, Quadruplet, mine_per_identity, mine_quadruplet, nca_loss,
                         quadruplet_as_triplets, quadruplet_as_triplets_terms, quadruplet_loss,
                         quadruplet_score_grads, triplet_loss)
from dafe.tensor import SeededRng


def exhaustive_mine(S, y):
    """Reference: plain loops, strict comparisons so the first (lowest index) candidate wins."""
    n = len(y)
    best = None
    for i, j in itertools.product(range(n), range(n)):
        if i != j and y[i] == y[j] and (best is None or S[i, j] < S[best]):
            best = (i, j)
    if best is None:
        raise DataError("none")
    i, j = best
    k = None
    for c in range(n):
        if y[c] != y[i] and (k is None or S[i, c] > S[i, k]):
            k = c
    l, fallback = None, False
    for c in range(n):
        if c != i and y[c] == y[i] and S[i, c] > S[i, k] and (l is None or S[i, c] < S[i, l]):
            l = c
    if l is None:
        fallback = True
        for c in range(n):
            if c != i and y[c] == y[i] and (l is None or S[i, c] < S[i, l]):
                l = c
    return i, j, l, k, fallback


def as_tuple(q):
    return q.i, q.j, q.l, q.k, q.fallback


def test_hand_example():
    y = np.array([0, 0, 1, 1])
    S = np.zeros((4, 4))
    for (a, b), v in {(0, 1): .6, (2, 3): .4, (0, 2): .5, (0, 3): .1, (1, 2): .3, (1, 3): .2}.items():
        S[a, b] = S[b, a] = v
    q = mine_quadruplet(S, y)
    assert (q.i, q.j, q.k, q.l, q.fallback) == (2, 3, 0, 3, True)
    assert (q.s_ij, q.s_ik, q.s_il) == (0.4, 0.5, 0.4)
    assert as_tuple(q) == exhaustive_mine(S, y)


def test_single_candidate():
    S = np.array([[0, .2, .7], [.2, 0, .1], [.7, .1, 0]])
    q = mine_quadruplet(S, [5, 5, 9])
    assert (q.i, q.j, q.k, q.l) == (0, 1, 2, 1)


def test_errors():
    with pytest.raises(DataError):
        mine_quadruplet(np.zeros((3, 3)), [0, 1, 2])
    with pytest.raises(DataError):
        mine_quadruplet(np.zeros((2, 2)), [0, 0])
    S = np.zeros((3, 3))
    S[0, 1] = np.nan
    with pytest.raises(DataError):
        mine_quadruplet(S, [0, 0, 1])
    with pytest.raises(ParameterError):
        Margins(0.5, 0.5)
    with pytest.raises(ParameterError):
        Margins(1.0, 0.0)


def random_batch(rng, n, ties):
    y = rng.integers(0, max(2, n // 3), size=n)
    y[:2] = y[0]
    if np.all(y == y[0]):
        y[-1] = y[0] + 1
    if ties:
        A = rng.integers(0, 4, size=(n, n)).astype(float)
    else:
        A = rng.normal(size=(n, n))
    return (A + A.T) / 2, y


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(3, 32), st.booleans())
def test_matches_exhaustive_search(seed, n, ties):
    rng = np.random.default_rng(seed)
    S, y = random_batch(rng, n, ties)
    q = mine_quadruplet(S, y)
    assert as_tuple(q) == exhaustive_mine(S, y)
    assert y[q.i] == y[q.j] == y[q.l] != y[q.k]
    assert q.i not in (q.j, q.l)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-50, 50))
def test_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    S, y = random_batch(rng, 12, False)
    a, b = mine_quadruplet(S, y), mine_quadruplet(S + shift, y)
    assert (a.i, a.j, a.l, a.k) == (b.i, b.j, b.l, b.k)


def test_random_positive_ablation():
    rng = np.random.default_rng(4)
    S, y = random_batch(rng, 16, False)
    picks = set()
    r = SeededRng(0)
    for _ in range(200):
        q = mine_quadruplet(S, y, rng=r, random_positive=True)
        assert y[q.l] == y[q.i] and q.l != q.i
        picks.add(q.l)
    assert picks == set(np.flatnonzero(y == y[q.i])) - {q.i}


def test_mine_per_identity():
    y = np.repeat(np.arange(4), 3)
    rng = np.random.default_rng(2)
    A = rng.normal(size=(12, 12))
    qs = mine_per_identity((A + A.T) / 2, y)
    assert len(qs) == 4
    assert sorted(y[q.i] for q in qs) == [0, 1, 2, 3]


def quad(s_ij, s_ik, s_il):
    return Quadruplet(0, 1, 2, 3, s_ij, s_ik, s_il)


def test_quadruplet_loss_values():
    assert abs(quadruplet_loss(quad(0.9, 0.2, 0.8)) - 0.3) < 1e-15
    assert quadruplet_loss(quad(3.0, 0.0, 2.0)) == 0.0
    m = Margins()
    assert (m.alpha1, m.alpha2) == (1.0, 0.5)


def test_quadruplet_score_grads():
    assert all(g == 0 for _, g in quadruplet_score_grads(quad(3.0, 0.0, 2.0)))
    grads = dict(quadruplet_score_grads(quad(0.9, 0.2, 0.8)))
    assert grads == {(0, 1): -1.0, (0, 3): 1.0, (0, 2): -0.0}


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 2))
def test_loss_properties(s_ij, s_ik, s_il, step):
    m = Margins()
    base = quadruplet_loss(quad(s_ij, s_ik, s_il), m)
    assert base >= 0
    assert quadruplet_loss(quad(s_ij + step, s_ik, s_il), m) <= base
    assert quadruplet_loss(quad(s_ij, s_ik + step, s_il), m) >= base
    zero = s_ij >= s_ik + m.alpha1 and s_il >= s_ik + m.alpha2
    assert (base == 0) == zero


def test_triplet_loss_cases_and_loop():
    F = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 0.0]])
    assert triplet_loss(F, [[0, 1, 2]], 1.0)[0] == 0.0
    G = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
    assert triplet_loss(G, [[0, 1, 2]], 0.7)[0] == 0.7
    rng = np.random.default_rng(0)
    F = rng.normal(size=(8, 4))
    T = rng.integers(0, 8, size=(6, 3))
    expected = 0.0
    for i, j, k in T:
        d_ik = sum((F[i, t] - F[k, t]) ** 2 for t in range(4))
        d_ij = sum((F[i, t] - F[j, t]) ** 2 for t in range(4))
        expected += max(0.0, d_ij - d_ik + 0.5)
    loss, grad = triplet_loss(F, T, 0.5)
    assert abs(loss - expected / 6) < 1e-12
    h = 1e-6
    num = np.zeros_like(F)
    for idx in np.ndindex(F.shape):
        P, M = F.copy(), F.copy()
        P[idx] += h
        M[idx] -= h
        num[idx] = (triplet_loss(P, T, 0.5)[0] - triplet_loss(M, T, 0.5)[0]) / (2 * h)
    np.testing.assert_allclose(grad, num, atol=1e-6)


def test_quadruplet_as_triplets():
    rng = np.random.default_rng(1)
    F = rng.normal(size=(4, 3))
    q = Quadruplet(0, 1, 2, 3, 0, 0, 0)
    a, b = quadruplet_as_triplets_terms(F, q, 0.4)
    combined = (np.sum((F[0] - F[1]) ** 2) + np.sum((F[0] - F[2]) ** 2)
                - 2 * np.sum((F[0] - F[3]) ** 2) + 0.8)
    assert abs(a + b - combined) < 1e-12
    assert abs(quadruplet_as_triplets(F, q, 0.4) - max(0.0, combined)) < 1e-12
    same = np.ones((4, 3))
    assert quadruplet_as_triplets(same, q, 0.4) == 0.8
    F[2] = F[1]
    pre = np.sum((F[0] - F[1]) ** 2) - np.sum((F[0] - F[3]) ** 2) + 0.4
    assert abs(quadruplet_as_triplets(F, q, 0.4) - max(0.0, 2 * pre)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_two_triplet_consistency(seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(4, 5))
    q = Quadruplet(0, 1, 2, 3, 0, 0, 0)
    a, b = quadruplet_as_triplets_terms(F, q, 0.3)
    combined = (np.sum((F[0] - F[1]) ** 2) + np.sum((F[0] - F[2]) ** 2)
                - 2 * np.sum((F[0] - F[3]) ** 2) + 0.6)
    assert abs(a + b - combined) < 1e-12


def loop_nca(F, y):
    n = len(y)
    terms = []
    for a in range(n):
        if not any(y[b] == y[a] for b in range(n) if b != a):
            continue
        k = [np.exp(-np.sum((F[a] - F[b]) ** 2)) for b in range(n)]
        num = sum(k[b] for b in range(n) if b != a and y[b] == y[a])
        den = sum(k[b] for b in range(n) if b != a)
        terms.append(-np.log(num / den))
    return sum(terms) / len(terms)


def test_nca_cases():
    y = np.array([0, 0, 0, 1, 1, 1])
    k = 3
    loss, _, skipped = nca_loss(np.ones((6, 2)), y)
    assert abs(loss + np.log((k - 1) / (2 * k - 1))) < 1e-12
    assert skipped == 0
    far = np.array([[0.0, 0], [0, 0], [0, 0], [20, 0], [20, 0], [20, 0]])
    assert nca_loss(far, y)[0] < 1e-12
    rng = np.random.default_rng(3)
    F = rng.normal(size=(7, 3))
    y = np.array([0, 0, 1, 1, 1, 2, 0])
    loss, grad, skipped = nca_loss(F, y)
    assert skipped == 1
    assert abs(loss - loop_nca(F, y)) < 1e-12
    h = 1e-6
    num = np.zeros_like(F)
    for idx in np.ndindex(F.shape):
        P, M = F.copy(), F.copy()
        P[idx] += h
        M[idx] -= h
        num[idx] = (nca_loss(P, y)[0] - nca_loss(M, y)[0]) / (2 * h)
    np.testing.assert_allclose(grad, num, atol=1e-7)
    with pytest.raises(DataError):
        nca_loss(F, np.zeros(7))
