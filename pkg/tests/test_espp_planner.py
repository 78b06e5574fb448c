import math

import numpy as np
import pytest

from espp import espp_planner as ep
from espp.clothoid import ClothoidCoefficients, FitBounds
from espp.potential_field import RoadGeometry
from oracles import in_sector as _in_sector, oracle_stop_point, random_stop_geometry as _random_geometry

ROAD = RoadGeometry()
CFG = ep.EsppConfig()
L_W = 1.6


# ---------------------------------------------------------------- sector


def test_sector_examples():
    s = ep.predict_motion_sector(0, 0, 0, 0.0, 20, 0.01, CFG)
    assert s.radius == 0 and s.area == 0
    assert not s.contains(0.0, 0.0)
    s = ep.predict_motion_sector(0, 0, 0, 32.0, 20, 0.01, CFG)
    assert s.alpha == pytest.approx(0.4)
    assert s.radius == pytest.approx(6.4)
    assert s.area == pytest.approx(8.192)
    s2 = ep.predict_motion_sector(0, 0, 0, 64.0, 20, 0.01, CFG)
    assert s2.area == pytest.approx(4 * s.area)


def test_sector_contains_matches_polar_test():
    rng = np.random.default_rng(0)
    sec = ep.MotionSector((3.0, 1.0), -0.4, 0.4, 6.0)
    pts = rng.uniform(-5, 12, (2000, 2))
    got = sec.contains(pts[:, 0], pts[:, 1])
    want = np.array([_in_sector(sec, x, y) for x, y in pts])
    assert np.array_equal(got, want)


def test_regions_cover_box_without_overlap():
    sec = ep.MotionSector((30.0, 1.0), -0.5, 0.4, 8.0)
    reg = ep.build_region((20.0, 0.0), 40.0, ROAD, sec)
    X, Y = np.meshgrid(np.linspace(20, 60, 161), np.linspace(-4, 0, 17))
    lab = reg.classify(X, Y)
    assert set(np.unique(lab)) <= {1, 2, 3, 4}
    assert (lab == 2).any() and (lab == 3).any() and (lab == 4).any() and (lab == 1).any()
    rng = reg.s2_x_range
    assert np.all(X[lab == 4] < rng[0]) and np.all(X[lab == 1] > rng[1])


# ---------------------------------------------------------------- anchors


def test_anchor_examples():
    a = ep.build_anchors((0, 0), (10, -3), -math.pi / 4)
    np.testing.assert_allclose(a.p_ip, (3, -3), atol=1e-12)
    assert a.l_espp == pytest.approx(3 * math.sqrt(2) + 7)
    a = ep.build_anchors((0, 0), (5, -2), -math.pi / 2)
    np.testing.assert_allclose(a.p_ip, (0, -2), atol=1e-12)


def test_anchor_corner_on_both_segments():
    rng = np.random.default_rng(1)
    for _ in range(50):
        bp = (rng.uniform(0, 50), 0.0)
        tilt = rng.uniform(0.1, 0.4)
        sp = (bp[0] + rng.uniform(30, 90), rng.uniform(-3.5, -0.5))
        a = ep.build_anchors(bp, sp, -tilt)
        assert a.p_ip[1] == pytest.approx(sp[1])
        ang = math.atan2(a.p_ip[1] - bp[1], a.p_ip[0] - bp[0])
        assert ang == pytest.approx(-tilt)


def test_hybrid_waypoints():
    a = ep.build_anchors((10, 0), (40, -3), -math.pi / 4)
    apf = np.array([[0.0, 1.0], [5.0, 0.5]])
    pts = ep.assemble_hybrid_waypoints(apf, a, 2, 3)
    assert len(pts) == len(apf) + 2 + 3 + 2
    seg = pts[3:5]
    np.testing.assert_allclose(seg, [[11, -1], [12, -2]], atol=1e-12)
    assert np.all(np.diff(pts[:, 0]) > 0)


# ---------------------------------------------------------------- stop point


def test_stop_point_matches_exhaustive_oracle():
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(40):
        p_bp, tilt, d_brake, sec = _random_geometry(rng)
        region = ep.build_region(p_bp, d_brake, ROAD, sec)
        want = oracle_stop_point(p_bp, tilt, region, d_brake, sec.heading)
        try:
            got = ep.select_stop_point(p_bp, tilt, region, ROAD, d_brake, L_W, sec.heading).point
        except ep.NoFeasibleStopPoint:
            got = None
        assert got == want
        checked += got is not None
    assert checked >= 20


def test_stop_point_avoids_s2_and_s3():
    rng = np.random.default_rng(12)
    for _ in range(40):
        p_bp, tilt, d_brake, sec = _random_geometry(rng)
        region = ep.build_region(p_bp, d_brake, ROAD, sec)
        try:
            res = ep.select_stop_point(p_bp, tilt, region, ROAD, d_brake, L_W, sec.heading)
        except ep.NoFeasibleStopPoint:
            continue
        if res.constrained:
            assert not _in_sector(sec, *res.point)
            assert res.region in (1, 4)


def test_single_feasible_candidate():
    # one braking distance shorter than the grid step leaves only the far edge
    p_bp, tilt, d_brake = (0.0, 0.0), 0.4, 0.1
    region = ep.build_region(p_bp, d_brake, ROAD, ep.MotionSector((500, 5), 0, 0.4, 1.0))
    with pytest.raises(ep.NoFeasibleStopPoint):
        ep.select_stop_point(p_bp, tilt, region, ROAD, d_brake, L_W)
    # unconstrained (obstacle heading away): every lattice point qualifies
    res = ep.select_stop_point(p_bp, tilt, region, ROAD, d_brake, L_W, obstacle_heading=0.1)
    # lowest lattice row: y_hi = -0.8 stepped by 0.25 while above -2.4
    assert res.point == (0.1, -2.3)


def test_far_corner_of_all_s1_box():
    p_bp, tilt, d_brake = (0.0, 0.0), 0.4, 50.0
    region = ep.build_region(p_bp, d_brake, ROAD, ep.MotionSector((500, 5), 0, 0.4, 1.0))
    res = ep.select_stop_point(p_bp, tilt, region, ROAD, d_brake, L_W)
    assert res.point[0] == pytest.approx(50.0)
    assert res.point[1] == pytest.approx(-2.3)
    assert res.region == 1


def test_tie_goes_to_larger_x():
    X = np.array([1.0, 2.0, 3.0])
    Y = np.array([-3.0, -2.0, -1.0])
    D = np.abs(X) + np.abs(Y)
    assert ep._argmax_tiebreak(X, Y, D, 0.0) == 2


# ---------------------------------------------------------------- potentials


def test_boundary_potential_zero_on_shifted_curve():
    curve = ClothoidCoefficients(-0.5, -0.05, -0.001, 1e-5)
    xs = np.linspace(0, 80, 50)
    for side, off in (("right", -CFG.corridor_half_width), ("left", CFG.corridor_half_width)):
        slope = curve.slope(xs)
        yb = curve.value(xs) + off * np.sqrt(1 + slope**2)
        vals = ep.espp_boundary_potential(xs, yb, curve, side, CFG)
        assert np.max(np.abs(vals)) < 1e-9


def test_boundary_potential_straight_corridor_profile():
    curve = ClothoidCoefficients(-1.0, 0.0, 0.0, 0.0)
    right = -1.0 - CFG.corridor_half_width
    left = -1.0 + CFG.corridor_half_width
    for d in (0.1, 0.5, 1.0, 3.0):
        profile = CFG.a_e * (1 - math.exp(-CFG.b_w * d)) ** 2
        # toward the corridor the wall saturates ...
        assert ep.espp_boundary_potential(5.0, right + d, curve, "right", CFG) == pytest.approx(profile, rel=1e-12)
        assert ep.espp_boundary_potential(5.0, left - d, curve, "left", CFG) == pytest.approx(profile, rel=1e-12)
        # ... and beyond it the exponent flips sign, so crossing costs more than A_e
        outside = CFG.a_e * (1 - math.exp(CFG.b_w * d)) ** 2
        assert ep.espp_boundary_potential(5.0, right - d, curve, "right", CFG) == pytest.approx(outside, rel=1e-12)
    far = ep.espp_boundary_potential(5.0, right + 200 / CFG.b_w, curve, "right", CFG)
    assert far == pytest.approx(CFG.a_e, rel=1e-9)
    assert ep.espp_boundary_potential(5.0, right - 20, curve, "right", CFG) > CFG.a_e


def test_attractive_potential_examples():
    assert ep.espp_attractive_potential(3.0, 4.0, (3.0, 4.0), 0.2) == 0.0
    assert ep.espp_attractive_potential(0.0, 0.0, (3.0, 4.0), 0.2) == pytest.approx(2.5)
    assert ep.espp_attractive_potential(0.0, 0.0, (6.0, 8.0), 0.2) == pytest.approx(10.0)


def test_attractive_gradient_points_to_target():
    rng = np.random.default_rng(2)
    tgt = (10.0, -2.0)
    h = 1e-6
    for _ in range(100):
        x, y = rng.uniform(-20, 40, 2)
        if math.hypot(x - tgt[0], y - tgt[1]) < 1e-3:
            continue
        gx = (ep.espp_attractive_potential(x + h, y, tgt, 0.2) - ep.espp_attractive_potential(x - h, y, tgt, 0.2)) / (2 * h)
        gy = (ep.espp_attractive_potential(x, y + h, tgt, 0.2) - ep.espp_attractive_potential(x, y - h, tgt, 0.2)) / (2 * h)
        assert -gx * (tgt[0] - x) - gy * (tgt[1] - y) > 0


# ---------------------------------------------------------------- plan


def _scenario_plan(**kw):
    obstacle = (112.0, 1.5, -0.1, 26.0)
    apf = np.column_stack([np.linspace(105, 130, 10), np.linspace(1.2, 0.6, 10)])
    return ep.plan_espp((100.0, 1.3, -0.02), 30.0, apf, obstacle, ROAD, 76.16, L_W, 20, 0.01, **kw)


def test_plan_terminal_tangent_and_curvature():
    plan = _scenario_plan()
    b = FitBounds()
    heading_end = math.atan(float(plan.curve.slope(plan.x_stop))) + plan.pose[2]
    assert abs(heading_end) <= b.e_psi_max + 1e-9
    r = np.linspace(0, plan.x_stop, 100)
    assert np.max(np.abs(plan.curve.curvature(r))) <= b.kappa_max


def test_plan_descent_lowers_potential():
    plan = _scenario_plan()
    u = [ep.espp_potential(x, y, plan.curve, plan.target, CFG) for x, y in plan.p_new]
    assert len(u) >= 2
    assert np.all(np.diff(u) < 0)


def test_plan_waypoints_sorted_and_stop_in_lane():
    plan = _scenario_plan()
    assert np.all(np.diff(plan.waypoints_world[:, 0]) > 0)
    sx, sy = plan.stop.point
    assert ROAD.esl_lower_y + L_W / 2 <= sy <= ROAD.lower_edge_y - L_W / 2
    # stop point reproduced by the curve (in the world frame) to the e_y bound
    y_world, _ = plan.sample(np.array([sx]))
    assert abs(y_world[0] - sy) < 0.7


def test_stopped_vehicle_has_no_escape_path():
    # D_brake = 0 leaves no candidate ahead: the caller brakes in place instead
    with pytest.raises(ep.NoFeasibleStopPoint):
        ep.plan_espp((50.0, -2.0, 0.0), 0.0, np.zeros((0, 2)), (0, 6, 0, 0), ROAD, 0.0, L_W, 20, 0.01)
