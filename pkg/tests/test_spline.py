import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.interpolate import BSpline
from scipy.optimize import linprog

from activecal import spline as spl
from activecal.spline import SegmentParam, SplineError


def cox_de_boor(knots: np.ndarray, i: int, k: int, u: float) -> float:
    """Textbook recursion; the last non-empty span is closed on the right."""
    if k == 0:
        if knots[i] <= u < knots[i + 1]:
            return 1.0
        last = knots[-1]
        return 1.0 if (u == last and knots[i] < knots[i + 1] == last) else 0.0
    out = 0.0
    d1 = knots[i + k] - knots[i]
    if d1 > 0:
        out += (u - knots[i]) / d1 * cox_de_boor(knots, i, k - 1, u)
    d2 = knots[i + k + 1] - knots[i + 1]
    if d2 > 0:
        out += (knots[i + k + 1] - u) / d2 * cox_de_boor(knots, i + 1, k - 1, u)
    return out


def oracle_point(ctrl: np.ndarray, j: int, q: float) -> np.ndarray:
    n = len(ctrl)
    knots = np.concatenate([np.zeros(4), np.arange(1, n - 3), np.full(4, n - 3.0)])
    u = (j - 1) + q
    w = np.array([cox_de_boor(knots, i, 3, u) for i in range(n)])
    return w @ ctrl


def random_spline(rng, n=7):
    return spl.build(rng.uniform(-2, 2, (n, 2)))


def test_build_validation():
    with pytest.raises(SplineError):
        spl.build([(0, 0)] * 4)
    with pytest.raises(SplineError):
        spl.build([(0, 0)] * 4 + [(math.nan, 0)])


def test_constant_spline():
    s = spl.build([(1.5, -0.5)] * 5)
    for j in (1, 2):
        for q in (0.1, 0.5, 1.0):
            assert np.allclose(spl.evaluate(s, SegmentParam(j, q)), [1.5, -0.5], atol=1e-14)
            assert np.allclose(spl.derivative(s, SegmentParam(j, q)), 0.0, atol=1e-14)
    headings = [p.theta for p in spl.sample_poses(s, 5)]
    assert headings == [0.0] * len(headings)


def test_collinear_x_axis():
    s = spl.build([(i, 0) for i in range(5)])
    for j in (1, 2):
        for q in np.linspace(0.05, 1, 7):
            p = spl.evaluate(s, SegmentParam(j, q))
            d = spl.derivative(s, SegmentParam(j, q))
            assert abs(p[1]) < 1e-14 and abs(d[1]) < 1e-14 and d[0] > 0
    assert all(abs(p.theta) < 1e-14 for p in spl.sample_poses(s, 10))


def test_endpoint_interpolation(rng):
    for _ in range(20):
        s = random_spline(rng, int(rng.integers(5, 12)))
        c = s.control_points
        assert np.linalg.norm(spl.evaluate(s, SegmentParam(1, 1e-12)) - c[0]) < 1e-9
        assert np.linalg.norm(spl.evaluate(s, SegmentParam(s.n_segments, 1.0)) - c[-1]) < 1e-9


def test_segment_count(rng):
    for n in range(5, 12):
        assert random_spline(rng, n).n_segments == n - 3


def test_matrix_form_matches_cox_de_boor_example():
    rng = np.random.default_rng(7)
    s = random_spline(rng, 7)
    got = spl.evaluate(s, SegmentParam(2, 0.37))
    assert np.allclose(got, oracle_point(s.control_points, 2, 0.37), atol=1e-10)


def test_matrix_form_matches_cox_de_boor_random(rng):
    for _ in range(1000):
        n = int(rng.integers(5, 11))
        s = random_spline(rng, n)
        j = int(rng.integers(1, n - 2))
        q = float(rng.uniform(1e-9, 1.0))
        assert np.allclose(spl.evaluate(s, SegmentParam(j, q)), oracle_point(s.control_points, j, q), atol=1e-10)


def test_matches_scipy_bspline_derivatives(rng):
    for _ in range(50):
        s = random_spline(rng, int(rng.integers(5, 10)))
        ref = BSpline(s.knots, s.control_points, 3)
        for j in range(1, s.n_segments + 1):
            q = float(rng.uniform(0.01, 0.99))
            for order in (1, 2):
                assert np.allclose(spl.derivative(s, SegmentParam(j, q), order), ref(j - 1 + q, nu=order), atol=1e-10)


def test_c2_continuity(rng):
    for _ in range(100):
        s = random_spline(rng, int(rng.integers(5, 11)))
        for j in range(1, s.n_segments):
            for order in (0, 1, 2):
                left = s.eval_segment(j, np.array([1.0]), order)[0]
                right = s.eval_segment(j + 1, np.array([0.0]), order)[0]
                assert np.allclose(left, right, atol=1e-9)


def test_derivative_finite_difference(rng):
    s = random_spline(rng, 7)
    h = 1e-6
    for order in (1, 2):
        sp = SegmentParam(2, 0.5)
        if order == 1:
            fd = (spl.evaluate(s, SegmentParam(2, 0.5 + h)) - spl.evaluate(s, SegmentParam(2, 0.5 - h))) / (2 * h)
        else:
            h2 = 1e-4
            fd = (spl.derivative(s, SegmentParam(2, 0.5 + h2)) - spl.derivative(s, SegmentParam(2, 0.5 - h2))) / (2 * h2)
        got = spl.derivative(s, sp, order)
        assert np.allclose(got, fd, rtol=1e-5, atol=1e-8)


def test_derivative_order_rejected(rng):
    with pytest.raises(SplineError):
        spl.derivative(random_spline(rng), SegmentParam(1, 0.5), 3)


@pytest.mark.parametrize("j, q", [(0, 0.5), (5, 0.5)])
def test_evaluate_out_of_range(rng, j, q):
    with pytest.raises(SplineError):
        spl.evaluate(random_spline(rng), SegmentParam(j, q))


@pytest.mark.parametrize("q", [0.0, 1.5, -0.1])
def test_segment_param_range(q):
    with pytest.raises(SplineError):
        SegmentParam(1, q)


def test_circle_headings_increase():
    ang = np.linspace(0, 1.5 * math.pi, 10)
    s = spl.build(np.column_stack([np.cos(ang), np.sin(ang)]))
    poses = spl.sample_poses(s, 10)
    h = np.unwrap([p.theta for p in poses])
    assert np.all(np.diff(h) > 0)
    # heading equals the tangent angle of the sampled polyline to first order
    xy = np.array([[p.x, p.y] for p in poses])
    chord = np.arctan2(*np.diff(xy, axis=0).T[::-1])
    mid = np.unwrap(h[:-1] + 0.5 * np.diff(h))
    assert np.max(np.abs(np.angle(np.exp(1j * (chord - mid))))) < 0.02


def test_sample_poses_needs_two_samples(rng):
    with pytest.raises(SplineError):
        spl.sample_poses(random_spline(rng), 1)


def test_replace_tail_identity(rng):
    s = random_spline(rng, 8)
    for k in range(2, s.n_segments + 1):
        tail = s.control_points[k + 1:]
        assert spl.replace_tail(s, k, tail) == s


def test_replace_tail_keeps_frozen_points(rng):
    s = random_spline(rng, 8)
    k = 3
    new = spl.replace_tail(s, k, rng.uniform(-2, 2, (spl.tail_size(s, k), 2)))
    assert np.array_equal(new.control_points[:k + 1], s.control_points[:k + 1])
    # position, velocity and acceleration at the start of segment k-1 survive
    for order in (0, 1, 2):
        a = s.eval_segment(k - 1, np.array([0.0]), order)
        b = new.eval_segment(k - 1, np.array([0.0]), order)
        assert np.allclose(a, b, atol=1e-12)


def test_replace_tail_last_point_only_moves_last_segment(rng):
    s = random_spline(rng, 8)
    tail = s.control_points[s.n_segments + 1:].copy()
    tail[-1] += (0.5, -0.3)
    new = spl.replace_tail(s, s.n_segments, tail)
    q = np.linspace(0, 1, 11)
    for j in range(1, s.n_segments):
        assert np.allclose(s.eval_segment(j, q), new.eval_segment(j, q), atol=1e-12)
    assert not np.allclose(s.eval_segment(s.n_segments, q[1:]), new.eval_segment(s.n_segments, q[1:]))


def test_replace_tail_errors(rng):
    s = random_spline(rng, 8)
    with pytest.raises(SplineError):
        spl.replace_tail(s, 1, s.control_points[2:])
    with pytest.raises(SplineError):
        spl.replace_tail(s, s.n_segments + 1, s.control_points[-1:])
    with pytest.raises(SplineError):
        spl.replace_tail(s, 3, s.control_points[:2])


def test_local_support_sweep(rng):
    s = random_spline(rng, 9)
    q = np.linspace(0.0, 1.0, 9)
    for i in range(s.n):
        moved = s.control_points.copy()
        moved[i] += (0.3, 0.2)
        t = spl.build(moved)
        for j in range(1, s.n_segments + 1):
            changed = not np.allclose(s.eval_segment(j, q[1:-1]), t.eval_segment(j, q[1:-1]), atol=1e-14)
            # segment j uses control points j-1 .. j+2 (0-based)
            assert changed == (j - 1 <= i <= j + 2), (i, j)


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=5, max_size=9),
       st.floats(0.001, 1.0))
def test_convex_hull(points, q):
    s = spl.build(points)
    for j in range(1, s.n_segments + 1):
        p = spl.evaluate(s, SegmentParam(j, q))
        seg = s.segment_points(j)
        # distance to the hull as an L1 feasibility LP: weights w >= 0, sum w = 1, seg^T w + e+ - e- = p
        A_eq = np.zeros((3, 8))
        A_eq[:2, :4] = seg.T
        A_eq[:2, 4:6] = np.eye(2)
        A_eq[:2, 6:8] = -np.eye(2)
        A_eq[2, :4] = 1.0
        res = linprog(np.r_[np.zeros(4), np.ones(4)], A_eq=A_eq, b_eq=np.append(p, 1.0),
                      bounds=[(0, None)] * 8, method="highs")
        assert res.status == 0 and res.fun < 1e-9
