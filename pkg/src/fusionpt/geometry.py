"""Rigid transforms, pinhole projection, and multi-sweep aggregation.

Everything downstream (superpoint construction, dense-cloud regularization,
temporal voting) rides on the three primitives here: SE(3) transforms,
perspective projection through a calibrated camera, and ego-motion
compensated concatenation of LiDAR sweeps.

All types are immutable after construction and all operations are pure,
so they are safe to call concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ROTATION_TOL = 1e-9


def _frozen_array(values, dtype=np.float64, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) transform: y = rotation @ x + translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = _frozen_array(self.rotation, shape=(3, 3))
        trans = _frozen_array(self.translation, shape=(3,))
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > ROTATION_TOL:
            raise ValueError(f"rotation is not orthonormal (deviation {err:.3e})")
        det = np.linalg.det(rot)
        if abs(det - 1.0) > ROTATION_TOL:
            raise ValueError(f"rotation determinant is {det}, expected +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix with bottom row (0,0,0,1)."""
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got shape {mat.shape}")
        if not np.array_equal(mat[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("bottom row of homogeneous matrix must be (0, 0, 0, 1)")
        return cls(mat[:3, :3], mat[:3, 3])

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rot_inv = self.rotation.T
        return RigidTransform(rot_inv, -rot_inv @ self.translation)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equal to applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation,
                          a.rotation @ b.translation + a.translation)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsic matrix plus the image size it maps into."""

    matrix: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        mat = _frozen_array(self.matrix, shape=(3, 3))
        if not np.array_equal(mat[2], [0.0, 0.0, 1.0]):
            raise ValueError("last intrinsics row must be (0, 0, 1)")
        if mat[0, 0] <= 0 or mat[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        object.__setattr__(self, "matrix", mat)


@dataclass(frozen=True)
class CalibratedCamera:
    """Intrinsics paired with the LiDAR-to-camera extrinsic transform."""

    intrinsics: CameraIntrinsics
    extrinsic: RigidTransform

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height


@dataclass(frozen=True)
class PointCloud:
    """N points with 3D coordinates and per-point attribute columns."""

    coords: np.ndarray
    attrs: np.ndarray = None
    timestamp: float = 0.0

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.size == 0:
            coords = coords.reshape(0, 3)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must be (N, 3), got {coords.shape}")
        if not np.isfinite(coords).all():
            raise ValueError("coords contain non-finite values")
        attrs = self.attrs
        if attrs is None:
            attrs = np.zeros((coords.shape[0], 0))
        attrs = np.array(attrs, dtype=np.float64)
        if attrs.ndim == 1:
            attrs = attrs[:, None]
        if attrs.shape[0] != coords.shape[0]:
            raise ValueError(
                f"attrs row count {attrs.shape[0]} does not match N={coords.shape[0]}")
        coords.setflags(write=False)
        attrs.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "attrs", attrs)
        object.__setattr__(self, "timestamp", float(self.timestamp))

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def attr_width(self) -> int:
        return self.attrs.shape[1]


@dataclass(frozen=True)
class Projections:
    """Pixel hits of cloud points in one camera, point index ascending.

    (u, v) are continuous pixel coordinates; rounding to integer pixels
    happens only at label-map lookup (floor rule, half-open bounds).
    """

    point_index: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    camera_index: int = 0

    def __post_init__(self):
        for name in ("point_index", "u", "v", "depth"):
            arr = np.asarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.point_index.shape[0]


def project_points(cloud: PointCloud, cam: CameraIntrinsics,
                   extr: RigidTransform, camera_index: int = 0) -> Projections:
    """Project cloud points through extrinsics and intrinsics onto the image.

    Keeps exactly the points with camera-frame depth z > 0 whose continuous
    pixel coordinates fall inside [0, width) x [0, height) after perspective
    division. Out-of-frustum points are silently excluded.
    """
    cam_pts = extr.apply(cloud.coords)
    z = cam_pts[:, 2]
    idx = np.flatnonzero(z > 0.0)
    cam_pts = cam_pts[idx]
    z = z[idx]
    uvw = cam_pts @ cam.matrix.T
    u = uvw[:, 0] / z
    v = uvw[:, 1] / z
    in_frame = (u >= 0.0) & (u < cam.width) & (v >= 0.0) & (v < cam.height)
    keep = np.flatnonzero(in_frame)
    return Projections(point_index=idx[keep], u=u[keep], v=v[keep],
                       depth=z[keep], camera_index=camera_index)


def unproject(u, v, depth, cam: CameraIntrinsics, extr: RigidTransform) -> np.ndarray:
    """Invert project_points for in-frustum points: pixel + depth -> 3D coords."""
    uv1 = np.stack([np.asarray(u, dtype=np.float64),
                    np.asarray(v, dtype=np.float64),
                    np.ones_like(np.asarray(u, dtype=np.float64))], axis=-1)
    cam_pts = (np.linalg.inv(cam.matrix) @ uv1.T).T * np.asarray(depth)[..., None]
    return extr.inverse().apply(cam_pts)


def transform_cloud(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Rigidly move coordinates; attributes and timestamp are untouched."""
    return PointCloud(t.apply(cloud.coords), cloud.attrs, cloud.timestamp)


def aggregate_sweeps(keyframe: PointCloud,
                     sweeps: list[tuple[PointCloud, RigidTransform]]) -> PointCloud:
    """Concatenate the keyframe with ego-motion aligned sweeps.

    Each sweep cloud is mapped into the keyframe coordinate system by its
    paired transform, then appended after the keyframe points. A provenance
    column is appended to the attributes: 0 for keyframe points, 1-based
    sweep index for sweep points.

    Raises ValueError when the attribute widths of the clouds disagree.
    """
    width = keyframe.attr_width
    for i, (sweep, _) in enumerate(sweeps):
        if sweep.attr_width != width:
            raise ValueError(
                f"sweep {i} has attribute width {sweep.attr_width}, "
                f"keyframe has {width}")
    coord_parts = [keyframe.coords]
    attr_parts = [keyframe.attrs]
    origin_parts = [np.zeros(len(keyframe))]
    for i, (sweep, t) in enumerate(sweeps):
        coord_parts.append(t.apply(sweep.coords))
        attr_parts.append(sweep.attrs)
        origin_parts.append(np.full(len(sweep), float(i + 1)))
    coords = np.concatenate(coord_parts, axis=0)
    attrs = np.concatenate(attr_parts, axis=0)
    origin = np.concatenate(origin_parts)[:, None]
    return PointCloud(coords, np.hstack([attrs, origin]), keyframe.timestamp)


# ---------------------------------------------------------------------------
# Calibration / pose files
# ---------------------------------------------------------------------------
# Calibration: UTF-8 JSON with `intrinsics` (9 reals, row-major),
# `extrinsic` (16 reals, row-major 4x4, bottom row 0,0,0,1), `width`, `height`.
# Pose file: one frame per line, 16 whitespace-separated reals (row-major 4x4).


def load_calibration(path) -> CalibratedCamera:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        intr = np.array(data["intrinsics"], dtype=np.float64).reshape(3, 3)
        extr = np.array(data["extrinsic"], dtype=np.float64).reshape(4, 4)
        width = int(data["width"])
        height = int(data["height"])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"malformed calibration file {path}: {exc}") from exc
    return CalibratedCamera(CameraIntrinsics(intr, width, height),
                            RigidTransform.from_matrix(extr))


def save_calibration(path, cam: CalibratedCamera) -> None:
    data = {
        "intrinsics": cam.intrinsics.matrix.reshape(-1).tolist(),
        "extrinsic": cam.extrinsic.as_matrix().reshape(-1).tolist(),
        "width": cam.width,
        "height": cam.height,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_poses(path) -> list[RigidTransform]:
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            if not line.strip():
                continue
            values = [float(tok) for tok in line.split()]
            if len(values) != 16:
                raise ValueError(
                    f"pose line {line_no} has {len(values)} values, expected 16")
            poses.append(RigidTransform.from_matrix(np.array(values).reshape(4, 4)))
    return poses


def save_poses(path, poses: list[RigidTransform]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pose in poses:
            fh.write(" ".join(repr(float(x)) for x in pose.as_matrix().reshape(-1)))
            fh.write("\n")
