import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmatch import ValidationError
from xmatch.evalkit import (PoseErrorRecord, auc_curve, corner_error, estimate_homography,
                            estimate_relative_pose, evaluate_pose, pose_angular_error,
                            write_report)
from xmatch.subpixel import SubPixelMatchSet

from oracles import angle_between_rotations, rigid, riemann_auc, rotation, two_view_points

K = np.array([[500.0, 0, 320], [0, 500, 240], [0, 0, 1]])
R_GT = rotation((0.1, 1.0, 0.05), 15.0)
T_GT = np.array([0.8, 0.05, 0.1])


def test_pose_error_cases():
    rec = pose_angular_error(R_GT, T_GT, R_GT, T_GT)
    assert rec.pose_error_deg == pytest.approx(0.0, abs=1e-6)
    rec = pose_angular_error(rotation((0, 0, 1), 10) @ R_GT, T_GT, R_GT, T_GT)
    assert rec.rotation_error_deg == pytest.approx(10.0)
    assert rec.pose_error_deg == pytest.approx(10.0)
    assert pose_angular_error(R_GT, -T_GT, R_GT, T_GT).translation_error_deg == pytest.approx(0, abs=1e-6)
    with pytest.raises(ValidationError):
        pose_angular_error(2 * R_GT, T_GT, R_GT, T_GT)


def test_pose_recovered_from_exact_matches():
    xa, xb = two_view_points(R_GT, T_GT, K, n=50)
    est = estimate_relative_pose(xa, xb, K, K)
    assert angle_between_rotations(est.R, R_GT) < 0.1
    rec = pose_angular_error(est.R, est.t, R_GT, T_GT)
    assert rec.pose_error_deg < 0.1
    again = estimate_relative_pose(xa, xb, K, K)
    np.testing.assert_array_equal(est.R, again.R)
    np.testing.assert_array_equal(est.t, again.t)


def test_too_few_matches_is_a_failure():
    xa, xb = two_view_points(R_GT, T_GT, K, n=4)
    assert estimate_relative_pose(xa, xb, K, K) is None
    m = SubPixelMatchSet(xa, xb, np.ones(4), np.arange(4))
    assert evaluate_pose(m, K, K, rigid(R_GT, T_GT)).pose_error_deg == 180.0


def test_pose_invariant_to_uniform_rescaling():
    xa, xb = two_view_points(R_GT, T_GT, K, n=50, seed=3)
    rng = np.random.default_rng(0)
    xa = xa + rng.normal(scale=0.3, size=xa.shape)
    xb = xb + rng.normal(scale=0.3, size=xb.shape)
    base = evaluate_pose(SubPixelMatchSet(xa, xb, np.ones(50), np.arange(50)), K, K, rigid(R_GT, T_GT))
    s = 0.5
    Ks = K.copy()
    Ks[:2] *= s
    scaled = evaluate_pose(SubPixelMatchSet(xa * s, xb * s, np.ones(50), np.arange(50)), Ks, Ks,
                           rigid(R_GT, T_GT))
    assert abs(base.pose_error_deg - scaled.pose_error_deg) < 0.01


def test_auc_hand_cases():
    assert auc_curve([2.0], [10.0]) == [80.0]
    assert auc_curve([0.0, 0.0], [5, 10, 20]) == [100.0, 100.0, 100.0]
    assert auc_curve([30.0, math.inf, 180.0], [5, 10, 20]) == [0.0, 0.0, 0.0]
    with pytest.raises(ValidationError):
        auc_curve([])
    with pytest.raises(ValidationError):
        auc_curve([-1.0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 40), min_size=1, max_size=30), st.floats(25, 1000))
def test_appending_large_error_never_increases_auc(errors, big):
    for T in (5.0, 10.0, 20.0):
        before = auc_curve(errors, [T])[0]
        assert auc_curve(errors + [big], [T])[0] <= before + 1e-12
        if len(errors) > 1:
            trimmed = sorted(errors)[:-1]
            assert auc_curve(trimmed, [T])[0] >= before - 1e-12


def test_auc_close_to_riemann_sum():
    rng = np.random.default_rng(0)
    for _ in range(10):
        errors = rng.exponential(8.0, size=rng.integers(1, 40))
        assert abs(auc_curve(errors, [10.0])[0] - riemann_auc(errors, 10.0)) < 0.05


def test_corner_error_cases():
    H = np.array([[1.1, 0.02, 3], [0.01, 0.95, -2], [1e-4, 0, 1]])
    assert corner_error(H, H, (480, 640)) == 0.0
    shift = np.array([[1, 0, 3], [0, 1, 4], [0, 0, 1.0]])
    assert corner_error(shift @ H, H, (480, 640)) == pytest.approx(5.0)
    assert corner_error(np.zeros((3, 3)), H, (480, 640)) == math.inf
    assert corner_error(None, H, (480, 640)) == math.inf


def test_homography_from_exact_matches():
    H = np.array([[1.05, 0.03, 4], [-0.02, 0.98, -3], [2e-5, 1e-5, 1]])
    pts = np.random.default_rng(1).uniform(0, 600, size=(40, 2))
    hom = np.c_[pts, np.ones(40)] @ H.T
    est = estimate_homography(pts, hom[:, :2] / hom[:, 2:])
    assert corner_error(est, H, (480, 640)) < 1e-3
    assert estimate_homography(pts[:3], pts[:3]) is None


def test_report_layout(tmp_path):
    recs = [PoseErrorRecord(1.0, 2.0, 2.0, 10, "x"), PoseErrorRecord.failure("y")]
    aucs = write_report(tmp_path / "r.txt", recs, [5, 10, 20], "deg")
    text = (tmp_path / "r.txt").read_text()
    assert "AUC@5deg\tAUC@10deg\tAUC@20deg" in text
    assert aucs[10] == pytest.approx(40.0)
    assert text.index("# per-pair") < text.index("# summary")
