import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tractkit.geometry import Affine, Streamline, apply_affine, flip
from tractkit.metric import (
    INFINITE, MatchResult, brute_force_compare, build_index, compare, distances, epsilon_candidates,
    brute_force_candidates, mdf, prepare,
)
from tractkit.tracts import Tractogram

from conftest import random_tractogram, random_walk


def _same(r1, r2, tol=1e-9):
    assert len(r1) == len(r2)
    for a, b in zip(r1, r2):
        assert a.query_index == b.query_index
        assert a.matched_index == b.matched_index
        if math.isinf(a.distance):
            assert math.isinf(b.distance)
        else:
            assert abs(a.distance - b.distance) <= tol


def test_match_result_invariant():
    with pytest.raises(ValueError):
        MatchResult(0, 1.0, None)
    with pytest.raises(ValueError):
        MatchResult(0, INFINITE, 3)


def test_mdf_examples():
    a = np.zeros((5, 3))
    b = a + [0, 3, 4]
    assert mdf(a, b) == 5.0
    s = np.stack([np.arange(5.0), np.zeros(5), np.zeros(5)], 1)
    assert mdf(s, s[::-1]) == 0.0
    with pytest.raises(ValueError):
        mdf(np.zeros((4, 3)), np.zeros((5, 3)))


pts_strategy = st.integers(0, 2 ** 32 - 1)


@settings(max_examples=1000, deadline=None)
@given(pts_strategy)
def test_mdf_properties_fuzz(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 30))
    a = rng.normal(size=(k, 3)) * rng.uniform(0.1, 50)
    b = rng.normal(size=(k, 3)) * rng.uniform(0.1, 50)
    d = mdf(a, b)
    assert d >= 0
    assert abs(d - mdf(b, a)) <= 1e-12 * max(1.0, d)
    assert abs(d - mdf(a[::-1], b)) <= 1e-12 * max(1.0, d)
    assert mdf(a, a) == 0.0
    off = rng.normal(size=3)
    off *= rng.uniform(0.01, 10) / np.linalg.norm(off)
    assert abs(mdf(a, a + off) - np.linalg.norm(off)) <= 1e-9


def test_candidates_agree_pointwise(rng):
    B = prepare(random_tractogram(rng, 60, box=15), 20)
    index = build_index(B, 1.0)
    for _ in range(300):
        c = rng.uniform(-2, 17, size=3)
        r = rng.uniform(0.2, 3.0)
        np.testing.assert_array_equal(epsilon_candidates(index, B, c, r), brute_force_candidates(B, c, r))


def test_segment_crossing_ball_without_vertex():
    # a long segment passes through the ball while both endpoints lie far outside
    B = prepare(Tractogram([Streamline([[-50, 0.5, 0], [50, 0.5, 0]])]), 2)
    index = build_index(B, 1.0)
    assert list(epsilon_candidates(index, B, np.zeros(3), 1.0)) == [0]
    assert list(brute_force_candidates(B, np.zeros(3), 1.0)) == [0]
    assert len(epsilon_candidates(index, B, np.array([0, 2.0, 0]), 1.0)) == 0


def test_compare_matches_brute_force(rng):
    for trial in range(40):
        nA, nB = int(rng.integers(1, 60)), int(rng.integers(1, 60))
        A = random_tractogram(rng, nA, box=12)
        B = random_tractogram(rng, nB, box=12)
        radius = float(rng.uniform(0.3, 3))
        K = int(rng.integers(2, 40))
        cell = float(rng.uniform(0.3, 4))
        _same(compare(A, B, radius, K, cell_size=cell), brute_force_compare(A, B, radius, K))


def test_threads_do_not_change_results(rng):
    A, B = random_tractogram(rng, 80, box=10), random_tractogram(rng, 80, box=10)
    r1 = compare(A, B, workers=1)
    _same(r1, compare(A, B, workers=4), tol=0)


def test_empty_inputs(rng):
    A = random_tractogram(rng, 5)
    assert compare(Tractogram([]), A) == []
    r = compare(A, Tractogram([]))
    assert all(math.isinf(x.distance) and x.matched_index is None for x in r)
    assert all(math.isinf(x.distance) for x in brute_force_compare(A, Tractogram([])))


def test_self_comparison_zero(rng):
    T = random_tractogram(rng, 40, box=10)
    d = distances(compare(T, T))
    assert np.all(d == 0.0)


def test_far_displacement_gives_outliers(rng):
    T = random_tractogram(rng, 20, box=10)
    far = Tractogram([apply_affine(s, Affine(np.eye(3), [1000, 0, 0])) for s in T])
    assert np.all(np.isinf(distances(compare(T, far))))


def test_monotone_in_radius(rng):
    A, B = random_tractogram(rng, 50, box=12), random_tractogram(rng, 50, box=12)
    prev = None
    for r in (0.25, 0.5, 1.0, 2.0, 4.0):
        d = distances(compare(A, B, radius=r))
        if prev is not None:
            # larger balls see supersets of candidates
            assert np.all(d <= prev)
        prev = d


def test_rigid_equivariance(rng):
    A, B = random_tractogram(rng, 40, box=12), random_tractogram(rng, 40, box=12)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    T = Affine(q, rng.normal(size=3) * 30)
    A2 = Tractogram([apply_affine(s, T) for s in A])
    B2 = Tractogram([apply_affine(s, T) for s in B])
    r1, r2 = compare(A, B), compare(A2, B2)
    # only compare entries whose ball membership is not within rounding of the radius
    for a, b in zip(r1, r2):
        if math.isinf(a.distance) == math.isinf(b.distance) and not math.isinf(a.distance):
            if a.matched_index == b.matched_index:
                assert abs(a.distance - b.distance) < 1e-9
    agree = sum(a.matched_index == b.matched_index for a, b in zip(r1, r2))
    assert agree >= len(r1) - 2


def test_flip_of_b_does_not_matter(rng):
    A, B = random_tractogram(rng, 40, box=12), random_tractogram(rng, 40, box=12)
    Bf = Tractogram([flip(s) for s in B])
    _same(compare(A, B), compare(A, Bf))


def test_lowest_index_wins_ties():
    s = Streamline([[0, 0, 0], [1, 0, 0], [2, 0, 0]])
    A = Tractogram([s])
    B = Tractogram([s, s, s])
    assert compare(A, B)[0].matched_index == 0
    assert brute_force_compare(A, B)[0].matched_index == 0


def test_seed_point_defines_ball():
    s = Streamline(np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], 1), seed_index=9)
    near_end = Streamline([[9, 0.5, 0], [9, 5, 0]])
    near_start = Streamline([[0, 0.5, 0], [0, 5, 0]])
    r = compare(Tractogram([s]), Tractogram([near_start, near_end]), K=10)
    assert r[0].matched_index == 1


def test_non_symmetry():
    long_ = Streamline(np.stack([np.linspace(0, 20, 21), np.zeros(21), np.zeros(21)], 1), seed_index=0)
    short = Streamline([[0, 0.2, 0], [2, 0.2, 0]])
    ab = distances(compare(Tractogram([long_]), Tractogram([short])))
    ba = distances(compare(Tractogram([short]), Tractogram([long_])))
    assert np.isfinite(ab).all() and np.isfinite(ba).all()
    assert ab[0] == pytest.approx(ba[0])  # MDF itself is symmetric
    far = Streamline([[10, 0.3, 0], [12, 0.3, 0]], seed_index=0)
    A = Tractogram([long_])
    B = Tractogram([short, far])
    assert distances(compare(A, B)).mean() != distances(compare(B, A)).mean()


def test_index_cells_contents(rng):
    B = prepare(Tractogram([Streamline(random_walk(rng, 10, step=0.7))]), 10)
    idx = build_index(B, 1.0)
    cells = idx.cells()
    assert sum(len(v) for v in cells.values()) == 10 == len(idx)
    for cell, ids in cells.items():
        for sl, pt in ids:
            assert tuple(np.floor(B.points[sl, pt] / 1.0).astype(int)) == cell


def test_bad_parameters(rng):
    A = random_tractogram(rng, 3)
    with pytest.raises(ValueError):
        compare(A, A, K=1)
    with pytest.raises(ValueError):
        compare(A, A, radius=0)
