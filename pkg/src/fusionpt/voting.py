"""Temporal voting over three consecutive frames' semantic scores, plus mIoU.

Each point of the current frame looks up its exact nearest neighbor in the
previous and next frames (all three clouds moved into one coordinate
system). Neighbors strictly closer than the distance threshold contribute
their score row; the accumulated row is divided by the number of
contributors (1, 2, or 3) and labels fall out of the per-row argmax.

The strict `<` comparison is kept exactly, so a zero threshold reproduces
the input scores unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .containers import SemanticScores
from .geometry import PointCloud, RigidTransform, transform_cloud


@dataclass(frozen=True)
class VoteConfig:
    """Distance threshold in meters; neighbors count only when d < sigma."""

    sigma: float = 0.25

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")


class NeighborIndex:
    """Exact nearest-neighbor queries over a fixed point set.

    Backed by a KD-tree; distances are recomputed from coordinates with the
    plain sum-of-squares formula so results (including the tie rule: equal
    distances go to the smallest point index) are bit-identical to a linear
    scan.
    """

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.size == 0:
            points = points.reshape(0, 3)
        self._points = points
        self._tree = cKDTree(points) if points.shape[0] else None

    def __len__(self) -> int:
        return self._points.shape[0]

    def query(self, queries: np.ndarray):
        """(squared distance, index) of the nearest stored point per query."""
        queries = np.asarray(queries, dtype=np.float64)
        n = queries.shape[0]
        if self._tree is None:
            return np.full(n, np.inf), np.full(n, -1, dtype=np.int64)
        dist, _ = self._tree.query(queries, k=1)
        d2 = np.empty(n)
        out_idx = np.empty(n, dtype=np.int64)
        for i in range(n):
            # Candidates within a whisker of the tree's answer; covers any
            # last-ulp disagreement between tree and scan arithmetic.
            radius = dist[i] + max(1e-9, dist[i] * 1e-9)
            cand = self._tree.query_ball_point(queries[i], radius)
            cand.sort()
            diffs = self._points[cand] - queries[i]
            cand_d2 = np.sum(diffs * diffs, axis=1)
            best = int(np.argmin(cand_d2))
            d2[i] = cand_d2[best]
            out_idx[i] = cand[best]
        return d2, out_idx


@dataclass(frozen=True)
class VoteFrame:
    cloud: PointCloud
    scores: SemanticScores
    to_unified: RigidTransform

    def __post_init__(self):
        if self.scores.rows != len(self.cloud):
            raise ValueError(
                f"{self.scores.rows} score rows for {len(self.cloud)} points")


def vote(prev: VoteFrame, curr: VoteFrame, next_: VoteFrame,
         cfg: VoteConfig = VoteConfig()):
    """Temporal voting; returns (refined SemanticScores, argmax labels).

    The threshold test compares squared distances (d^2 < sigma^2), the same
    convention the brute-force reference uses, so results agree bitwise.
    Argmax ties resolve to the lowest class index.
    """
    classes = curr.scores.classes
    if prev.scores.classes != classes or next_.scores.classes != classes:
        raise ValueError("all frames must share the class count")

    curr_pts = transform_cloud(curr.cloud, curr.to_unified).coords
    prev_pts = transform_cloud(prev.cloud, prev.to_unified).coords
    next_pts = transform_cloud(next_.cloud, next_.to_unified).coords

    sigma2 = cfg.sigma * cfg.sigma
    out = curr.scores.data.copy()
    counts = np.ones(out.shape[0])
    for pts, frame in ((prev_pts, prev), (next_pts, next_)):
        d2, idx = NeighborIndex(pts).query(curr_pts)
        take = d2 < sigma2
        out[take] += frame.scores.data[idx[take]]
        counts[take] += 1.0
    out /= counts[:, None]
    labels = np.argmax(out, axis=1).astype(np.uint32)
    return SemanticScores(out, probabilities=curr.scores.probabilities), labels


@dataclass(frozen=True)
class IoUResult:
    per_class: np.ndarray    # NaN for classes absent from both pred and truth
    mean: float


def miou(pred: np.ndarray, truth: np.ndarray, num_classes: int,
         ignore_label: int | None = None) -> IoUResult:
    """Per-class intersection-over-union and the mean over present classes.

    pred/truth entries must lie in [0, num_classes); rows whose truth equals
    ``ignore_label`` are skipped. Classes appearing in neither prediction nor
    truth are excluded from the mean.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if ignore_label is not None:
        keep = truth != ignore_label
        pred, truth = pred[keep], truth[keep]
    for name, labels in (("pred", pred), ("truth", truth)):
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"{name} labels fall outside [0, {num_classes})")

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denom = tp + fp + fn
    per_class = np.full(num_classes, np.nan)
    present = denom > 0
    per_class[present] = tp[present] / denom[present]
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return IoUResult(per_class, mean)
