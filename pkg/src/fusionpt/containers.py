"""Bit-exact binary containers plus the image-side domain types.

One little-endian container format ("FPT1") carries every array artifact:

    offset  size  field
    0       4     magic b"FPT1"
    4       1     kind tag (u8)
    5       1     dtype tag (u8)
    6       2     reserved (u16, written as 0)
    8       32    four u64 dims (semantics are kind-specific)
    40      --    raw payload, row-major, little-endian

Kinds:
    1  point cloud      dims (N, L, 0, 0); payload = timestamp f64,
                        coords N*3 f64, attrs N*L f64
    2  label map        dims (H, W, 0, 0); payload = H*W u32
    3  feature map      dims (H', W', E, 0); payload = H'*W'*E f64
    4  semantic scores  dims (N, C, probabilities_flag, 0); payload N*C f64
    5  label vector     dims (N, 0, 0, 0); payload N u32
    6  tensor           dims (ndim, d0, d1, d2), ndim <= 3; payload f64

write(load(x)) == x byte-for-byte for every kind.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud

MAGIC = b"FPT1"
HEADER = struct.Struct("<4sBBH4Q")

KIND_POINT_CLOUD = 1
KIND_LABEL_MAP = 2
KIND_FEATURE_MAP = 3
KIND_SEMANTIC_SCORES = 4
KIND_LABEL_VECTOR = 5
KIND_TENSOR = 6

DTYPE_F64 = 1
DTYPE_U32 = 2
_DTYPES = {DTYPE_F64: np.dtype("<f8"), DTYPE_U32: np.dtype("<u4")}

UNLABELED = np.uint32(0xFFFFFFFF)

# Refuse dims whose payload would exceed this many elements; catches garbage
# headers before any allocation is attempted.
_MAX_ELEMENTS = 1 << 40


class ContainerError(ValueError):
    """Raised for malformed FPT1 containers."""


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel u32 region (or class) ids; 0xFFFFFFFF marks unlabeled."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.uint32)
        if labels.ndim != 2:
            raise ValueError(f"labels must be (H, W), got shape {labels.shape}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def region_ids(self) -> np.ndarray:
        """Distinct labeled ids, ascending; the sentinel is excluded."""
        ids = np.unique(self.labels)
        return ids[ids != UNLABELED]

    def region_areas(self) -> dict[int, int]:
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts) if i != UNLABELED}


@dataclass(frozen=True)
class FeatureMap:
    """Image feature grid at stride S: (H/S, W/S, E), all values finite."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"feature map must be (H', W', E), got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("feature map contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class SemanticScores:
    """N x C per-point class scores; rows are simplex points when flagged."""

    data: np.ndarray
    probabilities: bool = True

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"scores must be (N, C), got shape {data.shape}")
        if self.probabilities and data.size > 0:
            if data.min() < -1e-9 or data.max() > 1.0 + 1e-9:
                raise ValueError("probability scores must lie in [0, 1]")
            sums = data.sum(axis=1)
            bad = np.abs(sums - 1.0) > 1e-6
            if bad.any():
                raise ValueError(
                    f"probability rows must sum to 1; row {int(np.flatnonzero(bad)[0])} "
                    f"sums to {sums[bad][0]!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def classes(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# Low-level container IO
# ---------------------------------------------------------------------------


def _write(path, kind: int, dtype_tag: int, dims, payload: np.ndarray) -> None:
    dims = tuple(int(d) for d in dims) + (0,) * (4 - len(dims))
    header = HEADER.pack(MAGIC, kind, dtype_tag, 0, *dims)
    raw = np.ascontiguousarray(payload, dtype=_DTYPES[dtype_tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(raw)


def _read(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER.size:
        raise ContainerError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, kind, dtype_tag, reserved, d0, d1, d2, d3 = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    if reserved != 0:
        raise ContainerError(f"{path}: reserved field must be 0, got {reserved}")
    if dtype_tag not in _DTYPES:
        raise ContainerError(f"{path}: unknown dtype tag {dtype_tag}")
    dims = (d0, d1, d2, d3)
    if any(d > _MAX_ELEMENTS for d in dims):
        raise ContainerError(f"{path}: dimension overflow in {dims}")
    return kind, dtype_tag, dims, blob[HEADER.size:]


def _payload_array(path, raw: bytes, dtype_tag: int, count: int) -> np.ndarray:
    dtype = _DTYPES[dtype_tag]
    expected = count * dtype.itemsize
    if len(raw) != expected:
        raise ContainerError(
            f"{path}: payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype).copy()


def save_point_cloud(path, cloud: PointCloud) -> None:
    n, width = len(cloud), cloud.attr_width
    payload = np.concatenate([
        np.array([cloud.timestamp]),
        cloud.coords.reshape(-1),
        cloud.attrs.reshape(-1),
    ])
    _write(path, KIND_POINT_CLOUD, DTYPE_F64, (n, width), payload)


def load_point_cloud(path) -> PointCloud:
    kind, dtype_tag, dims, raw = _read(path)
    if kind != KIND_POINT_CLOUD:
        raise ContainerError(f"{path}: expected point cloud, found kind {kind}")
    n, width = dims[0], dims[1]
    flat = _payload_array(path, raw, dtype_tag, 1 + n * 3 + n * width)
    return PointCloud(flat[1:1 + n * 3].reshape(n, 3),
                      flat[1 + n * 3:].reshape(n, width),
                      timestamp=flat[0])


def save_label_map(path, label_map: LabelMap) -> None:
    _write(path, KIND_LABEL_MAP, DTYPE_U32,
           (label_map.height, label_map.width), label_map.labels.reshape(-1))


def load_label_map(path) -> LabelMap:
    kind, dtype_tag, dims, raw = _read(path)
    if kind != KIND_LABEL_MAP:
        raise ContainerError(f"{path}: expected label map, found kind {kind}")
    h, w = dims[0], dims[1]
    return LabelMap(_payload_array(path, raw, dtype_tag, h * w).reshape(h, w))


def save_feature_map(path, feature_map: FeatureMap) -> None:
    _write(path, KIND_FEATURE_MAP, DTYPE_F64, feature_map.data.shape,
           feature_map.data.reshape(-1))


def load_feature_map(path) -> FeatureMap:
    kind, dtype_tag, dims, raw = _read(path)
    if kind != KIND_FEATURE_MAP:
        raise ContainerError(f"{path}: expected feature map, found kind {kind}")
    h, w, e = dims[0], dims[1], dims[2]
    return FeatureMap(_payload_array(path, raw, dtype_tag, h * w * e).reshape(h, w, e))


def save_scores(path, scores: SemanticScores) -> None:
    _write(path, KIND_SEMANTIC_SCORES, DTYPE_F64,
           (scores.rows, scores.classes, int(scores.probabilities)),
           scores.data.reshape(-1))


def load_scores(path) -> SemanticScores:
    kind, dtype_tag, dims, raw = _read(path)
    if kind != KIND_SEMANTIC_SCORES:
        raise ContainerError(f"{path}: expected semantic scores, found kind {kind}")
    n, c, flag = dims[0], dims[1], dims[2]
    return SemanticScores(_payload_array(path, raw, dtype_tag, n * c).reshape(n, c),
                          probabilities=bool(flag))


def save_label_vector(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint32)
    if labels.ndim != 1:
        raise ValueError(f"label vector must be 1-D, got shape {labels.shape}")
    _write(path, KIND_LABEL_VECTOR, DTYPE_U32, (labels.shape[0],), labels)


def load_label_vector(path) -> np.ndarray:
    kind, dtype_tag, dims, raw = _read(path)
    if kind != KIND_LABEL_VECTOR:
        raise ContainerError(f"{path}: expected label vector, found kind {kind}")
    return _payload_array(path, raw, dtype_tag, dims[0])


def save_tensor(path, tensor: np.ndarray) -> None:
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim == 0:
        tensor = tensor.reshape(1)
    if tensor.ndim > 3:
        raise ValueError(f"tensor rank {tensor.ndim} exceeds 3")
    dims = (tensor.ndim,) + tensor.shape
    _write(path, KIND_TENSOR, DTYPE_F64, dims, tensor.reshape(-1))


def load_tensor(path) -> np.ndarray:
    kind, dtype_tag, dims, raw = _read(path)
    if kind != KIND_TENSOR:
        raise ContainerError(f"{path}: expected tensor, found kind {kind}")
    ndim = dims[0]
    if not 1 <= ndim <= 3:
        raise ContainerError(f"{path}: bad tensor rank {ndim}")
    shape = dims[1:1 + ndim]
    count = 1
    for d in shape:
        count *= d
    if count > _MAX_ELEMENTS:
        raise ContainerError(f"{path}: dimension overflow in {shape}")
    return _payload_array(path, raw, dtype_tag, count).reshape(shape)
