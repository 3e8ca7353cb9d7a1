import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oicrkit.geometry import Box, Detection, iou, iou_matrix, nms, nms_indices


def brute_force_nms(boxes, scores, thr):
    """Quadratic reference: scan candidates by (score desc, index asc)."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if iou(Box(*boxes[i]), Box(*boxes[j])) > thr:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


# quarter-unit grid keeps box arithmetic exact
coord = st.integers(-400, 400).map(lambda v: v / 4)
extent = st.integers(0, 200).map(lambda v: v / 4)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(extent), draw(extent)
    return Box(x, y, x + w, y + h)


def test_iou_examples():
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box(20, 20, 30, 30)) == 0.0
    # intersection 50, union 150
    assert iou(a, Box(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_of_degenerate_boxes_is_zero():
    p = Box(3, 3, 3, 3)
    assert iou(p, p) == 0.0
    assert iou(Box(0, 0, 0, 5), Box(0, 0, 0, 5)) == 0.0


def test_malformed_box_rejected():
    with pytest.raises(ValueError):
        Box(5, 0, 1, 1)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(boxes())
def test_self_iou_is_one(a):
    if a.area > 0:
        assert iou(a, a) == pytest.approx(1.0)


@given(boxes(), boxes(), st.integers(-50, 50), st.integers(-50, 50))
def test_iou_translation_invariant(a, b, dx, dy):
    # integer shifts keep float arithmetic close to exact
    sa = Box(a.x_min + dx, a.y_min + dy, a.x_max + dx, a.y_max + dy)
    sb = Box(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy)
    assert iou(sa, sb) == iou(a, b)


@given(st.lists(boxes(), min_size=1, max_size=8), st.lists(boxes(), min_size=1, max_size=8))
def test_iou_matrix_matches_scalar(xs, ys):
    m = iou_matrix(np.array([b.as_tuple() for b in xs]), np.array([b.as_tuple() for b in ys]))
    for i, a in enumerate(xs):
        for j, b in enumerate(ys):
            assert m[i, j] == pytest.approx(iou(a, b), rel=1e-12, abs=1e-15)


def _det(box, s):
    return Detection(Box(*box), 1, s)


def test_nms_examples():
    assert nms([], 0.3) == []
    one = [_det((0, 0, 1, 1), 0.5)]
    assert nms(one, 0.3) == one
    dup = [_det((0, 0, 10, 10), 0.9), _det((0, 0, 10, 10), 0.8)]
    assert nms(dup, 0.3) == [dup[0]]
    a, b, c = _det((0, 0, 10, 10), 0.9), _det((5, 0, 15, 10), 0.8), _det((100, 100, 110, 110), 0.7)
    assert nms([a, b, c], 0.3) == [a, c]


def test_nms_ties_prefer_lower_index():
    dets = [Detection(Box(0, 0, 10, 10), 1, 0.5), Detection(Box(1, 0, 11, 10), 1, 0.5)]
    assert nms(dets, 0.3) == [dets[0]]


def test_nms_rejects_mixed_classes():
    with pytest.raises(ValueError):
        nms([Detection(Box(0, 0, 1, 1), 1, 0.5), Detection(Box(0, 0, 1, 1), 2, 0.4)], 0.3)


def _random_instance(rng, n):
    xy = rng.uniform(0, 100, size=(n, 2))
    wh = rng.uniform(1, 40, size=(n, 2))
    b = np.hstack([xy, xy + wh])
    # coarse scores so ties actually occur
    s = rng.integers(0, 20, size=n) / 20.0
    return b, s


@pytest.mark.parametrize("seed", range(100))
def test_nms_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 201))
    b, s = _random_instance(rng, n)
    thr = float(rng.choice([0.0, 0.3, 0.5, 0.7]))
    assert nms_indices(b, s, thr) == brute_force_nms(b, s, thr)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_nms_greedy_property(seed, thr):
    rng = np.random.default_rng(seed)
    b, s = _random_instance(rng, 40)
    keep = nms_indices(b, s, thr)
    assert [s[i] for i in keep] == sorted([s[i] for i in keep], reverse=True)
    m = iou_matrix(b[keep], b[keep])
    np.fill_diagonal(m, 0.0)
    assert not (m > thr).any()
