"""Image-pair ingestion and synthetic homography pairs.

Conventions used throughout the package:

* pixel centres sit at integer coordinates, so an image of width ``W``
  spans ``[-0.5, W - 0.5]``;
* poses are 4x4 world-to-camera transforms and the relative pose A->B is
  ``T_B @ inv(T_A)``;
* homographies map source pixel coordinates to warped pixel coordinates.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from ._validation import InputError, ValidationError, check_intensity, check_matrix

LUMA = np.array([0.299, 0.587, 0.114])
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".npy")
DEPTH_SUFFIXES = (".png", ".bin")


@dataclass
class CalibrationRecord:
    intrinsics_a: np.ndarray
    intrinsics_b: np.ndarray
    pose_a: np.ndarray
    pose_b: np.ndarray
    depth_a: np.ndarray
    depth_b: np.ndarray


@dataclass
class ImagePair:
    """Two padded single-channel images plus optional geometry.

    ``mask_a``/``mask_b`` flag the valid (non-padded) pixels and
    ``scale_a``/``scale_b`` hold the per-axis (sx, sy) resize factors, so a
    point ``p`` in the loaded grid sits at ``p / scale`` in the file.
    """

    image_a: np.ndarray
    image_b: np.ndarray
    pair_id: str = ""
    intrinsics_a: np.ndarray | None = None
    intrinsics_b: np.ndarray | None = None
    pose_a: np.ndarray | None = None
    pose_b: np.ndarray | None = None
    depth_a: np.ndarray | None = None
    depth_b: np.ndarray | None = None
    mask_a: np.ndarray | None = None
    mask_b: np.ndarray | None = None
    scale_a: tuple = (1.0, 1.0)
    scale_b: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.mask_a is None:
            self.mask_a = np.ones(self.image_a.shape, dtype=bool)
        if self.mask_b is None:
            self.mask_b = np.ones(self.image_b.shape, dtype=bool)
        geometry = [self.intrinsics_a, self.intrinsics_b, self.pose_a,
                    self.pose_b, self.depth_a, self.depth_b]
        present = [g is not None for g in geometry]
        if any(present) and not all(present):
            raise ValidationError(
                "intrinsics, poses and depth must be given together or not at all"
            )

    @property
    def has_geometry(self) -> bool:
        return self.depth_a is not None

    def swapped(self) -> "ImagePair":
        return ImagePair(
            self.image_b, self.image_a, self.pair_id, self.intrinsics_b,
            self.intrinsics_a, self.pose_b, self.pose_a, self.depth_b,
            self.depth_a, self.mask_b, self.mask_a, self.scale_b, self.scale_a,
        )


@dataclass
class HomographyParams:
    """Sampling ranges for synthetic homographies.

    Perspective terms act on coordinates normalised so that the longer image
    side spans [-1, 1]; rotation is in degrees.
    """

    scale_range: tuple = (0.8, 1.2)
    perspective_range: tuple = (-0.15, 0.15)
    rotation_range: tuple = (-15.0, 15.0)

    def validate(self):
        lo, hi = self.scale_range
        if not 0.5 <= lo <= hi <= 2.0:
            raise ValidationError("scale_range must satisfy 0.5 <= lo <= hi <= 2")
        lo, hi = self.perspective_range
        if not -0.5 <= lo <= hi <= 0.5:
            raise ValidationError("perspective_range must lie within [-0.5, 0.5]")
        lo, hi = self.rotation_range
        if not -45.0 <= lo <= hi <= 45.0:
            raise ValidationError("rotation_range must lie within [-45, 45] degrees")

    @classmethod
    def identity(cls) -> "HomographyParams":
        return cls((1.0, 1.0), (0.0, 0.0), (0.0, 0.0))


@dataclass
class SyntheticPairRecord:
    source_image: np.ndarray
    warped_image: np.ndarray
    gt_homography: np.ndarray
    seed: int
    source_rgb: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class PairDescriptor:
    pair_id: str
    path_a: Path
    path_b: Path
    depth_a: Path | None = None
    depth_b: Path | None = None


# -- image files -------------------------------------------------------------

def to_gray(image: np.ndarray) -> np.ndarray:
    """Luma conversion of an RGB array (channels last) in [0, 1]."""
    if image.ndim == 2:
        return image
    return np.clip(image[..., :3] @ LUMA, 0.0, 1.0)


def read_image(path, gray=True) -> np.ndarray:
    """Read an image file as float64 in [0, 1] (RGB order when ``gray=False``)."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"image file not found: {path}")
    if path.suffix.lower() == ".npy":
        arr = np.load(path).astype(np.float64)
    else:
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise InputError(f"cannot decode image: {path}")
        scale = 65535.0 if raw.dtype == np.uint16 else 255.0
        arr = raw.astype(np.float64) / scale
        if arr.ndim == 3:
            arr = arr[..., 2::-1] if arr.shape[2] >= 3 else arr[..., 0]
    if gray:
        arr = to_gray(arr)
    return np.clip(arr, 0.0, 1.0)


def write_image(path, image: np.ndarray):
    """Write a [0, 1] grayscale or RGB array as an 8-bit image."""
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    if arr.ndim == 3:
        arr = arr[..., ::-1]
    if not cv2.imwrite(str(path), arr):
        raise InputError(f"cannot write image: {path}")


def read_depth(path, shape=None) -> np.ndarray:
    """Read a depth map: 16-bit PNG in millimetres or raw float32 ``.bin``."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"depth file not found: {path}")
    if path.suffix.lower() == ".bin":
        flat = np.fromfile(path, dtype="<f4").astype(np.float64)
        if shape is None or flat.size != shape[0] * shape[1]:
            raise ValidationError(
                f"raw depth {path} holds {flat.size} values, expected {shape}"
            )
        return flat.reshape(shape)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InputError(f"cannot decode depth: {path}")
    return raw.astype(np.float64) / 1000.0


def read_calib(path) -> dict:
    """Parse ``calib.txt``: ``<id> <9 intrinsics> <16 pose values>`` per line."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"poses file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 26:
            raise ValidationError(f"{path}:{lineno}: expected id + 25 numbers")
        vals = np.array([float(v) for v in parts[1:]])
        out[parts[0]] = (vals[:9].reshape(3, 3), vals[9:].reshape(4, 4))
    return out


def write_calib(path, calib: dict):
    with open(path, "w") as fh:
        for key in sorted(calib):
            K, T = calib[key]
            nums = " ".join(f"{v:.10g}" for v in np.concatenate([np.ravel(K), np.ravel(T)]))
            fh.write(f"{key} {nums}\n")


def read_pairs(path) -> list:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"pairs file not found: {path}")
    pairs = []
    for line in path.read_text().splitlines():
        parts = line.split("#", 1)[0].split()
        if parts:
            if len(parts) != 2:
                raise ValidationError(f"{path}: each line must hold two image ids")
            pairs.append((parts[0], parts[1]))
    return pairs


# -- loading ----------------------------------------------------------------

def pad_to_multiple(image: np.ndarray, factor: int = 8):
    """Zero-pad bottom/right so both dims divide ``factor``; returns (padded, mask)."""
    h, w = image.shape[:2]
    ph, pw = -h % factor, -w % factor
    padded = np.pad(image, ((0, ph), (0, pw)) + ((0, 0),) * (image.ndim - 2))
    mask = np.zeros(padded.shape[:2], dtype=bool)
    mask[:h, :w] = True
    return padded, mask


def _resize_longer_side(image, max_side, interpolation=None):
    h, w = image.shape[:2]
    s = max_side / max(h, w)
    if s == 1.0:
        return image, (1.0, 1.0)
    new_w, new_h = max(1, round(w * s)), max(1, round(h * s))
    if interpolation is None:
        interpolation = cv2.INTER_AREA if s < 1 else cv2.INTER_LINEAR
    out = cv2.resize(image, (new_w, new_h), interpolation=interpolation)
    return np.clip(out, 0.0, None), (new_w / w, new_h / h)


def scale_intrinsics(K: np.ndarray, sx: float, sy: float) -> np.ndarray:
    """Scale focal lengths and principal point by the resize factors."""
    return np.diag([sx, sy, 1.0]) @ np.asarray(K, dtype=np.float64)


def load_pair(path_a, path_b, meta: CalibrationRecord | None = None,
              max_side: int = 640, pair_id: str | None = None) -> ImagePair:
    """Load two images as a padded grayscale :class:`ImagePair`.

    The longer side of each image is resized to ``max_side`` and both dims are
    zero-padded to multiples of 8. Intrinsics and depth follow the resize.
    """
    images, masks, scales, depths, Ks = [], [], [], [], []
    for idx, path in enumerate((path_a, path_b)):
        img = read_image(path)
        if meta is not None:
            depth = np.asarray((meta.depth_a, meta.depth_b)[idx], dtype=np.float64)
            if depth.shape != img.shape:
                raise ValidationError(
                    f"depth for {Path(path).name} has shape {depth.shape}, "
                    f"image has {img.shape}"
                )
            K = check_matrix((meta.intrinsics_a, meta.intrinsics_b)[idx], (3, 3), "intrinsics")
        img, (sx, sy) = _resize_longer_side(img, max_side)
        resized_hw = img.shape
        img, mask = pad_to_multiple(img, 8)
        images.append(img)
        masks.append(mask)
        scales.append((sx, sy))
        if meta is not None:
            if (sx, sy) != (1.0, 1.0):
                depth = cv2.resize(depth, resized_hw[::-1], interpolation=cv2.INTER_NEAREST)
            depths.append(pad_to_multiple(depth, 8)[0])
            Ks.append(scale_intrinsics(K, sx, sy))

    if pair_id is None:
        pair_id = f"{Path(path_a).stem}__{Path(path_b).stem}"
    geometry = {}
    if meta is not None:
        geometry = dict(
            intrinsics_a=Ks[0], intrinsics_b=Ks[1],
            pose_a=check_matrix(meta.pose_a, (4, 4), "pose_a"),
            pose_b=check_matrix(meta.pose_b, (4, 4), "pose_b"),
            depth_a=depths[0], depth_b=depths[1],
        )
    return ImagePair(images[0], images[1], pair_id=pair_id, mask_a=masks[0],
                     mask_b=masks[1], scale_a=scales[0], scale_b=scales[1], **geometry)


def save_pair(pair: ImagePair, directory) -> tuple:
    """Write the valid region of a loaded pair so ``load_pair`` can re-read it.

    Returns ``(path_a, path_b, meta)`` ready to pass back to :func:`load_pair`.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths, crops = [], []
    for tag, img, mask in (("a", pair.image_a, pair.mask_a), ("b", pair.image_b, pair.mask_b)):
        h, w = int(mask.any(1).sum()), int(mask.any(0).sum())
        p = directory / f"{pair.pair_id or 'pair'}_{tag}.npy"
        np.save(p, img[:h, :w])
        paths.append(p)
        crops.append((h, w))
    meta = None
    if pair.has_geometry:
        (ha, wa), (hb, wb) = crops
        meta = CalibrationRecord(pair.intrinsics_a, pair.intrinsics_b, pair.pose_a,
                                 pair.pose_b, pair.depth_a[:ha, :wa], pair.depth_b[:hb, :wb])
    return paths[0], paths[1], meta


def relative_pose(pose_a: np.ndarray, pose_b: np.ndarray) -> np.ndarray:
    """4x4 transform taking camera-A coordinates to camera-B coordinates."""
    return np.asarray(pose_b) @ np.linalg.inv(np.asarray(pose_a))


# -- dataset layouts --------------------------------------------------------

def _find_by_stem(directory: Path, stem: str, suffixes) -> Path | None:
    for suf in suffixes:
        p = directory / f"{stem}{suf}"
        if p.is_file():
            return p
    return None


def scan_dataset(root, layout: str = "aligned") -> list:
    """List the image pairs under ``root`` in deterministic sorted order.

    ``posed`` expects ``images/``, ``depth/``, ``pairs.txt`` and the poses
    file ``calib.txt``; ``aligned`` expects co-registered ``vis/`` and
    ``tir/`` images with matching file names.
    """
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"dataset root not found: {root}")
    if not any(root.iterdir()):
        return []
    if layout == "posed":
        for sub in ("images", "depth"):
            if not (root / sub).is_dir():
                raise InputError(f"posed layout: missing subdirectory '{sub}/' in {root}")
        if not (root / "calib.txt").is_file():
            raise InputError(f"posed layout: missing poses file 'calib.txt' in {root}")
        if not (root / "pairs.txt").is_file():
            raise InputError(f"posed layout: missing pairs file 'pairs.txt' in {root}")
        out = []
        for id_a, id_b in sorted(read_pairs(root / "pairs.txt")):
            files = [_find_by_stem(root / "images", i, IMAGE_SUFFIXES) for i in (id_a, id_b)]
            depths = [_find_by_stem(root / "depth", i, DEPTH_SUFFIXES) for i in (id_a, id_b)]
            for i, f in zip((id_a, id_b), files):
                if f is None:
                    raise InputError(f"posed layout: no image file for id '{i}'")
            out.append(PairDescriptor(f"{id_a}__{id_b}", files[0], files[1], depths[0], depths[1]))
        return out
    if layout == "aligned":
        for sub in ("vis", "tir"):
            if not (root / sub).is_dir():
                raise InputError(f"aligned layout: missing subdirectory '{sub}/' in {root}")
        vis = {p.name: p for p in (root / "vis").iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
        tir = {p.name: p for p in (root / "tir").iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
        return [PairDescriptor(Path(n).stem, vis[n], tir[n]) for n in sorted(vis.keys() & tir.keys())]
    raise ValidationError(f"unknown layout {layout!r}; expected 'posed' or 'aligned'")


def load_descriptor(desc: PairDescriptor, calib: dict | None = None,
                    max_side: int = 640) -> ImagePair:
    """Load a descriptor returned by :func:`scan_dataset`."""
    meta = None
    if desc.depth_a is not None and calib is not None:
        id_a, id_b = desc.pair_id.split("__")
        shape_a = read_image(desc.path_a).shape
        shape_b = read_image(desc.path_b).shape
        meta = CalibrationRecord(
            calib[id_a][0], calib[id_b][0], calib[id_a][1], calib[id_b][1],
            read_depth(desc.depth_a, shape_a), read_depth(desc.depth_b, shape_b),
        )
    return load_pair(desc.path_a, desc.path_b, meta, max_side=max_side, pair_id=desc.pair_id)


# -- synthetic homographies ---------------------------------------------------

def _normaliser(shape) -> np.ndarray:
    h, w = shape[:2]
    s = max(h, w) / 2.0
    return np.array([[1 / s, 0, -(w - 1) / 2 / s], [0, 1 / s, -(h - 1) / 2 / s], [0, 0, 1]])


def compose_homography(shape, scale=1.0, rotation_deg=0.0, perspective=(0.0, 0.0)) -> np.ndarray:
    """Homography in pixel coordinates: perspective . rotation . scale about the centre."""
    N = _normaliser(shape)
    a = math.radians(rotation_deg)
    R = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
    S = np.diag([scale, scale, 1.0])
    P = np.eye(3)
    P[2, :2] = perspective
    H = np.linalg.inv(N) @ P @ R @ S @ N
    return H / H[2, 2]


def sample_homography(shape, params: HomographyParams, rng: np.random.Generator) -> np.ndarray:
    scale = rng.uniform(*params.scale_range)
    rot = rng.uniform(*params.rotation_range)
    persp = rng.uniform(*params.perspective_range, size=2)
    return compose_homography(shape, scale, rot, persp)


def apply_homography(H: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Map (N, 2) points through ``H``; points mapped to infinity come back as inf."""
    pts = np.asarray(points, dtype=np.float64)
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ np.asarray(H).T
    with np.errstate(divide="ignore", invalid="ignore"):
        out = hom[:, :2] / hom[:, 2:3]
    out[~np.isfinite(out).all(1) | (hom[:, 2] <= 0)] = np.inf
    return out


def warp_image(image: np.ndarray, H: np.ndarray, out_shape=None) -> np.ndarray:
    """Inverse-map ``image`` through ``H`` with bilinear sampling, zero outside."""
    h, w = (out_shape or image.shape)[:2]
    out = cv2.warpPerspective(
        np.ascontiguousarray(image, dtype=np.float64), np.asarray(H, dtype=np.float64),
        (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )
    return np.clip(out, 0.0, 1.0)


def _is_degenerate(H, shape) -> bool:
    h, w = shape[:2]
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    w_coord = np.concatenate([corners, np.ones((4, 1))], 1) @ H[2]
    return (not np.isfinite(H).all() or abs(np.linalg.det(H)) < 1e-8
            or np.linalg.cond(H) > 1e8 or (w_coord <= 0.1).any())


def build_synthetic_pair(image: np.ndarray, params: HomographyParams | None = None,
                         seed: int = 0, max_retries: int = 10,
                         rgb: np.ndarray | None = None) -> SyntheticPairRecord:
    """Warp ``image`` by a homography drawn from ``params`` with a seeded stream."""
    image = check_intensity(image)
    params = params or HomographyParams()
    params.validate()
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        H = sample_homography(image.shape, params, rng)
        if not _is_degenerate(H, image.shape):
            break
    else:
        raise ValidationError(f"no well-conditioned homography after {max_retries} draws")
    return SyntheticPairRecord(image, warp_image(image, H), H, seed, rgb)


def with_images(record: SyntheticPairRecord, source=None, warped=None) -> SyntheticPairRecord:
    return replace(record, source_image=record.source_image if source is None else source,
                   warped_image=record.warped_image if warped is None else warped)


def list_files(directory, suffixes=IMAGE_SUFFIXES) -> list:
    return sorted(Path(directory) / n for n in os.listdir(directory)
                  if Path(n).suffix.lower() in suffixes)
