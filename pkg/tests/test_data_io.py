import itertools

import cv2
import numpy as np
import pytest

from xmatch import InputError, ValidationError
from xmatch.data_io import (CalibrationRecord, HomographyParams, apply_homography,
                            build_synthetic_pair, compose_homography, load_descriptor, load_pair,
                            pad_to_multiple, read_calib, relative_pose, save_pair, scan_dataset,
                            warp_image, write_calib, write_image)
from xmatch.toy import make_scene


def _scene(size=64, seed=0):
    return make_scene(np.random.default_rng(seed), size).mean(axis=2)


def test_load_pair_resizes_longer_side_and_pads(tmp_path):
    rgb = np.random.default_rng(0).uniform(size=(2160, 3840, 3))
    thermal = np.random.default_rng(1).uniform(size=(512, 640))
    cv2.imwrite(str(tmp_path / "vis.png"), (rgb * 255).astype(np.uint8))
    cv2.imwrite(str(tmp_path / "tir.png"), (thermal * 255).astype(np.uint8))
    pair = load_pair(tmp_path / "vis.png", tmp_path / "tir.png")
    assert pair.image_a.shape == (360, 640)
    assert pair.image_b.shape == (512, 640)
    for img in (pair.image_a, pair.image_b):
        assert img.shape[0] % 8 == 0 and img.shape[1] % 8 == 0
        assert 0.0 <= img.min() and img.max() <= 1.0
    assert pair.scale_a == pytest.approx((1 / 6, 1 / 6))
    assert pair.scale_b == (1.0, 1.0)


def test_load_pair_identity_case(tmp_path):
    img = np.random.default_rng(0).uniform(size=(480, 640))
    np.save(tmp_path / "a.npy", img)
    np.save(tmp_path / "b.npy", img[::-1])
    pair = load_pair(tmp_path / "a.npy", tmp_path / "b.npy")
    np.testing.assert_array_equal(pair.image_a, img)
    np.testing.assert_array_equal(pair.image_b, img[::-1])
    assert not pair.has_geometry
    assert pair.intrinsics_a is None and pair.pose_a is None and pair.depth_a is None
    assert pair.mask_a.all()


def test_load_pair_pads_with_zeros_and_masks(tmp_path):
    img = np.full((50, 61), 0.5)
    np.save(tmp_path / "a.npy", img)
    pair = load_pair(tmp_path / "a.npy", tmp_path / "a.npy", max_side=61)
    assert pair.image_a.shape == (56, 64)
    assert pair.mask_a.sum() == 50 * 61
    assert (pair.image_a[~pair.mask_a] == 0).all()


def _meta(shape, depth_shape=None):
    K = np.array([[500.0, 0, 320], [0, 500, 240], [0, 0, 1]])
    d = np.full(depth_shape or shape, 5.0)
    return CalibrationRecord(K, K, np.eye(4), np.eye(4), d, d)


def test_load_pair_rejects_depth_of_wrong_shape(tmp_path):
    np.save(tmp_path / "a.npy", np.zeros((48, 64)))
    with pytest.raises(ValidationError, match="depth"):
        load_pair(tmp_path / "a.npy", tmp_path / "a.npy", _meta((48, 64), (40, 64)))


def test_load_pair_missing_file_is_input_error(tmp_path):
    with pytest.raises(InputError):
        load_pair(tmp_path / "nope.png", tmp_path / "nope.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(InputError):
        load_pair(tmp_path / "junk.png", tmp_path / "junk.png")


def test_intrinsics_scale_exactly_with_resize(tmp_path):
    np.save(tmp_path / "a.npy", np.random.default_rng(0).uniform(size=(480, 1280)))
    meta = _meta((480, 1280))
    pair = load_pair(tmp_path / "a.npy", tmp_path / "a.npy", meta, max_side=640)
    s = 0.5
    expected = meta.intrinsics_a.copy()
    expected[:2] *= s
    np.testing.assert_allclose(pair.intrinsics_a, expected, rtol=0, atol=1e-12)
    assert pair.depth_a.shape == pair.image_a.shape


def test_load_pair_is_idempotent(tmp_path):
    img = np.random.default_rng(3).uniform(size=(100, 150))
    np.save(tmp_path / "a.npy", img)
    np.save(tmp_path / "b.npy", img.T.copy())
    first = load_pair(tmp_path / "a.npy", tmp_path / "b.npy", max_side=120, pair_id="p")
    pa, pb, meta = save_pair(first, tmp_path / "out")
    second = load_pair(pa, pb, meta, max_side=120, pair_id="p")
    np.testing.assert_array_equal(first.image_a, second.image_a)
    np.testing.assert_array_equal(first.image_b, second.image_b)
    np.testing.assert_array_equal(first.mask_a, second.mask_a)


def test_pad_to_multiple():
    padded, mask = pad_to_multiple(np.ones((9, 17)), 8)
    assert padded.shape == (16, 24)
    assert mask.sum() == 9 * 17


def test_synthetic_pair_identity_ranges():
    img = _scene()
    rec = build_synthetic_pair(img, HomographyParams.identity(), seed=3)
    np.testing.assert_allclose(rec.gt_homography, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(rec.warped_image, img, atol=1e-12)


def test_synthetic_pair_is_deterministic():
    img = _scene()
    a = build_synthetic_pair(img, seed=11)
    b = build_synthetic_pair(img, seed=11)
    np.testing.assert_array_equal(a.gt_homography, b.gt_homography)
    np.testing.assert_array_equal(a.warped_image, b.warped_image)
    assert a.warped_image.shape == img.shape
    assert abs(np.linalg.det(a.gt_homography)) > 0


def test_synthetic_corner_displacement_within_extreme_bound():
    shape = (480, 640)
    rec = build_synthetic_pair(np.zeros(shape), seed=7)
    p = HomographyParams()
    corners = np.array([[0, 0], [639, 0], [639, 479], [0, 479]], dtype=float)
    actual = np.linalg.norm(apply_homography(rec.gt_homography, corners) - corners, axis=1)
    grid = lambda lo, hi: np.linspace(lo, hi, 5)
    bound = np.zeros(4)
    for s, r, px, py in itertools.product(grid(*p.scale_range), grid(*p.rotation_range),
                                          grid(*p.perspective_range), grid(*p.perspective_range)):
        H = compose_homography(shape, s, r, (px, py))
        d = np.linalg.norm(apply_homography(H, corners) - corners, axis=1)
        bound = np.maximum(bound, d)
    assert (actual <= bound + 1e-9).all()


def test_warp_round_trip_interior():
    img = cv2.GaussianBlur(_scene(128, seed=4), (5, 5), 1.0)
    rec = build_synthetic_pair(img, seed=5)
    back = warp_image(rec.warped_image, np.linalg.inv(rec.gt_homography))
    ys, xs = np.mgrid[0:128, 0:128]
    pts = np.stack([xs.ravel(), ys.ravel()], 1).astype(float)
    fwd = apply_homography(rec.gt_homography, pts)
    inside = ((fwd >= 8) & (fwd <= 119)).all(1) & ((pts >= 8) & (pts <= 119)).all(1)
    diff = np.abs(back.ravel() - img.ravel())[inside]
    assert diff.mean() < 0.02


def test_homography_params_validation():
    with pytest.raises(ValidationError):
        HomographyParams(scale_range=(0.1, 1.0)).validate()
    with pytest.raises(ValidationError):
        HomographyParams(rotation_range=(-90, 0)).validate()


def _write_posed(root, with_calib=True):
    (root / "images").mkdir(parents=True)
    (root / "depth").mkdir()
    for name in ("x", "y", "z"):
        np.save(root / "images" / f"{name}.npy", np.random.default_rng(0).uniform(size=(16, 16)))
        cv2.imwrite(str(root / "depth" / f"{name}.png"), np.full((16, 16), 5000, np.uint16))
    (root / "pairs.txt").write_text("y z\nx y\n")
    if with_calib:
        K = np.array([[20.0, 0, 8], [0, 20, 8], [0, 0, 1]])
        T = np.eye(4)
        T2 = np.eye(4)
        T2[0, 3] = -1.0
        write_calib(root / "calib.txt", {"x": (K, T), "y": (K, T2), "z": (K, T)})


def test_scan_dataset_empty_directory(tmp_path):
    assert scan_dataset(tmp_path, "posed") == []
    assert scan_dataset(tmp_path, "aligned") == []


def test_scan_dataset_sorted_pairs(tmp_path):
    _write_posed(tmp_path)
    descs = scan_dataset(tmp_path, "posed")
    assert [d.pair_id for d in descs] == ["x__y", "y__z"]
    calib = read_calib(tmp_path / "calib.txt")
    pair = load_descriptor(descs[0], calib)
    assert pair.has_geometry
    np.testing.assert_allclose(pair.depth_a, 5.0)


def test_scan_dataset_missing_poses_file(tmp_path):
    _write_posed(tmp_path, with_calib=False)
    with pytest.raises(InputError, match="poses"):
        scan_dataset(tmp_path, "posed")


def test_scan_dataset_aligned(tmp_path):
    for sub in ("vis", "tir"):
        (tmp_path / sub).mkdir()
        for name in ("b.png", "a.png"):
            write_image(tmp_path / sub / name, np.zeros((8, 8)))
    (tmp_path / "vis" / "c.png").write_bytes(b"")  # no thermal partner
    assert [d.pair_id for d in scan_dataset(tmp_path, "aligned")] == ["a", "b"]
    with pytest.raises(InputError, match="tir"):
        (tmp_path / "tir" / "a.png").unlink()
        (tmp_path / "tir" / "b.png").unlink()
        (tmp_path / "tir").rmdir()
        scan_dataset(tmp_path, "aligned")


def test_relative_pose_convention():
    T_a = np.eye(4)
    T_a[:3, 3] = [1, 2, 3]
    T_b = np.eye(4)
    T_b[:3, 3] = [0, 2, 3]
    X_w = np.array([0.5, -1.0, 4.0, 1.0])
    np.testing.assert_allclose(relative_pose(T_a, T_b) @ (T_a @ X_w), T_b @ X_w)


def test_calib_round_trip(tmp_path):
    K = np.array([[1.5, 0, 2], [0, 1.25, 3], [0, 0, 1]])
    T = np.eye(4)
    T[:3, 3] = [0.1, 0.2, 0.3]
    write_calib(tmp_path / "c.txt", {"id": (K, T)})
    (K2, T2), = read_calib(tmp_path / "c.txt").values()
    np.testing.assert_allclose(K2, K)
    np.testing.assert_allclose(T2, T)
