"""Toy point encoder, projection heads, and unit-norm embedding plumbing.

The point encoder is a per-point two-layer perceptron (not a sparse-voxel
network); it exists to exercise the objectives end to end at desk scale.
The image branch is a frozen teacher: its feature grids arrive as data and
only the image-side projection head carries trainable parameters.

Forward helpers return the caches their backward counterparts need, so a
trainer can backpropagate analytically without any autograd machinery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_EPS = 1e-12


@dataclass(frozen=True)
class EmbeddingMatrix:
    """M x C embedding rows; unit length (within 1e-9) when ``normalized``."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"embeddings must be (M, C), got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("embeddings contain non-finite values")
        if self.normalized and data.shape[0] > 0:
            err = np.abs(np.linalg.norm(data, axis=1) - 1.0)
            if err.max() > 1e-9:
                row = int(err.argmax())
                raise ValueError(f"row {row} is not unit length (|norm-1|={err[row]:.2e})")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def l2_normalize_rows(x: np.ndarray):
    """Scale each row to unit length; returns (normalized, cache).

    Raises ValueError naming the first offending row if any row has
    (near-)zero norm.
    """
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    tiny = norms[:, 0] < NORM_EPS
    if tiny.any():
        raise ValueError(f"row {int(np.flatnonzero(tiny)[0])} has zero norm")
    y = x / norms
    return y, (y, norms)


def l2_normalize_rows_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    """d/dx of y = x/|x| applied row-wise: (g - y (y.g)) / |x|."""
    y, norms = cache
    inner = np.sum(grad_out * y, axis=1, keepdims=True)
    return (grad_out - y * inner) / norms


@dataclass
class PointEncoder:
    """Per-point MLP: in_dim -> hidden (rectifier) -> out_dim."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, in_dim: int, hidden_dim: int, out_dim: int,
             rng: np.random.Generator) -> "PointEncoder":
        return cls(w1=_uniform_init(rng, in_dim, (in_dim, hidden_dim)),
                   b1=_uniform_init(rng, in_dim, hidden_dim),
                   w2=_uniform_init(rng, hidden_dim, (hidden_dim, out_dim)),
                   b2=_uniform_init(rng, hidden_dim, out_dim))

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def forward(self, x: np.ndarray):
        z1 = x @ self.w1 + self.b1
        a1 = np.maximum(z1, 0.0)
        out = a1 @ self.w2 + self.b2
        return out, (x, z1, a1)

    def backward(self, grad_out: np.ndarray, cache) -> "PointEncoder":
        """Parameter gradients, packaged in the same shape as the encoder."""
        x, z1, a1 = cache
        gw2 = a1.T @ grad_out
        gb2 = grad_out.sum(axis=0)
        da1 = grad_out @ self.w2.T
        dz1 = da1 * (z1 > 0.0)
        return PointEncoder(w1=x.T @ dz1, b1=dz1.sum(axis=0), w2=gw2, b2=gb2)


@dataclass
class ProjectionHead:
    """Affine map into the shared C-dimensional space."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator) -> "ProjectionHead":
        return cls(weight=_uniform_init(rng, in_dim, (in_dim, out_dim)),
                   bias=_uniform_init(rng, in_dim, out_dim))

    def forward(self, feats: np.ndarray):
        return feats @ self.weight + self.bias, feats

    def backward(self, grad_out: np.ndarray, cache):
        """(parameter gradients, gradient w.r.t. the input features)."""
        feats = cache
        grads = ProjectionHead(weight=feats.T @ grad_out, bias=grad_out.sum(axis=0))
        return grads, grad_out @ self.weight.T


def _uniform_init(rng: np.random.Generator, fan_in: int, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def encode_points(enc: PointEncoder, cloud) -> np.ndarray:
    """Per-point features for a cloud: rows follow the input point order."""
    x = np.hstack([cloud.coords, cloud.attrs])
    if x.shape[1] != enc.in_dim:
        raise ValueError(
            f"cloud provides {x.shape[1]} input columns, encoder expects {enc.in_dim}")
    out, _ = enc.forward(x)
    return out


def bilinear_upsample(grid: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Resize an (h, w, C) grid with bilinear interpolation.

    Uses the half-pixel-center convention: source coordinate for output x is
    (x + 0.5) * w_in / w_out - 0.5, clamped to the border (edge replication).
    """
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape[:2]
    ys = (np.arange(out_height) + 0.5) * (h / out_height) - 0.5
    xs = (np.arange(out_width) + 0.5) * (w / out_width) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bottom = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def project_and_normalize(head: ProjectionHead, feats: np.ndarray,
                          out_size: tuple[int, int] | None = None) -> EmbeddingMatrix:
    """Apply a projection head and unit-normalize every output row.

    Point side: feats is (N, D) and maps straight through the head. Image
    side: feats is an (h', w', E) grid that is bilinear-upsampled to
    ``out_size`` (height, width) first, then mapped per pixel; the result is
    flattened to (H*W, C) rows.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 3:
        if out_size is None:
            raise ValueError("image-side projection requires out_size=(H, W)")
        feats = bilinear_upsample(feats, *out_size).reshape(-1, feats.shape[2])
    elif feats.ndim != 2:
        raise ValueError(f"expected (N, D) rows or (h, w, E) grid, got {feats.shape}")
    projected, _ = head.forward(feats)
    rows, _ = l2_normalize_rows(projected)
    return EmbeddingMatrix(rows, normalized=True)
