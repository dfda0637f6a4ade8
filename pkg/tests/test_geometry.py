import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nofrills.geometry import Box, boxes_to_array, iou, iou_matrix, nms

from conftest import random_box


def reference_nms(dets, threshold):
    """Greedy suppression by repeated full scans; written without sorting helpers."""
    remaining = list(range(len(dets)))
    kept = []
    while remaining:
        best = remaining[0]
        for k in remaining[1:]:
            if dets[k][1] > dets[best][1] or (dets[k][1] == dets[best][1] and k < best):
                best = k
        remaining.remove(best)
        if all(iou(dets[best][0], dets[j][0]) <= threshold for j in kept):
            kept.append(best)
    return kept


def test_box_rejects_degenerate():
    with pytest.raises(ValueError):
        Box(0, 0, 0, 5)
    with pytest.raises(ValueError):
        Box(0, 5, 3, 2)
    with pytest.raises(ValueError):
        Box(0, 0, math.nan, 1)


def test_box_basics():
    b = Box(1, 2, 4, 8)
    assert b.width == 3 and b.height == 6 and b.area == 18
    assert b.center == (2.5, 5.0)
    assert b.inside(4, 8) and not b.inside(3.9, 8)


def test_iou_examples():
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box(20, 20, 30, 30)) == 0.0
    assert iou(a, Box(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)
    # touching edges share no area
    assert iou(a, Box(10, 0, 20, 10)) == 0.0


def test_iou_symmetric_and_translation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(500):
        a, b = random_box(rng), random_box(rng)
        assert iou(a, b) == iou(b, a)
        dx, dy = rng.uniform(-50, 50, 2)
        assert iou(a.shifted(dx, dy), b.shifted(dx, dy)) == pytest.approx(iou(a, b), abs=1e-12)
        assert 0.0 <= iou(a, b) <= 1.0


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(1)
    A = [random_box(rng) for _ in range(7)]
    B = [random_box(rng) for _ in range(5)]
    m = iou_matrix(boxes_to_array(A), boxes_to_array(B))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            assert m[i, j] == iou(a, b)


def test_nms_examples():
    assert nms([], 0.3) == []
    b = Box(0, 0, 10, 10)
    assert nms([(b, 0.5)], 0.3) == [0]
    assert nms([(b, 0.8), (b, 0.9)], 0.3) == [1]
    # equal scores: lower index wins
    assert nms([(b, 0.7), (b, 0.7)], 0.3) == [0]


def test_nms_threshold_extremes():
    rng = np.random.default_rng(2)
    dets = [(random_box(rng), float(rng.random())) for _ in range(20)]
    assert sorted(nms(dets, 1.0)) == list(range(20))
    kept = nms(dets, 0.0)
    for i in kept:
        for j in kept:
            if i != j:
                assert iou(dets[i][0], dets[j][0]) == 0.0


def test_nms_rejects_bad_input():
    b = Box(0, 0, 1, 1)
    with pytest.raises(ValueError):
        nms([(b, 0.5)], 1.5)
    with pytest.raises(ValueError):
        nms([(b, math.inf)], 0.3)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 30), st.sampled_from([0.0, 0.3, 0.5, 0.7, 1.0]))
def test_nms_matches_reference(seed, n, thr):
    rng = np.random.default_rng(seed)
    # coarse scores so that ties occur
    dets = [(random_box(rng, 40, 40), float(rng.integers(0, 5)) / 4) for _ in range(n)]
    kept = nms(dets, thr)
    assert kept == reference_nms(dets, thr)
    for i in kept:
        for j in kept:
            if i < j:
                assert iou(dets[i][0], dets[j][0]) <= thr
