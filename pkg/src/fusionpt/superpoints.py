"""Superpoint construction, cross-view label alignment, and region pooling.

A superpixel is a labeled region of a camera's LabelMap; the superpoint it
induces is the set of LiDAR points whose projection lands inside it. Points
visible from several cameras are assigned to the lowest camera index with a
labeled hit, so each point belongs to at most one region.

Cross-view alignment (align_views) removes class disagreements between
overlapping cameras by relabeling each conflicting instance group to the
class of its largest-area member.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .containers import LabelMap, UNLABELED
from .geometry import CalibratedCamera, PointCloud, project_points


@dataclass(frozen=True)
class RegionMeta:
    camera_index: int
    superpixel_id: int
    pixel_area: int


@dataclass(frozen=True)
class SuperpointIndex:
    """Partition of the camera-visible subset of a cloud into M regions.

    group_of[i] is the region index of point i, or -1 when the point hits no
    labeled pixel in any camera. regions[m] lists the member point indices of
    region m; every region is nonempty.
    """

    group_of: np.ndarray
    regions: tuple[np.ndarray, ...]
    region_meta: tuple[RegionMeta, ...]

    def __post_init__(self):
        group_of = np.asarray(self.group_of, dtype=np.int64)
        group_of.setflags(write=False)
        object.__setattr__(self, "group_of", group_of)
        object.__setattr__(self, "regions",
                           tuple(np.asarray(r, dtype=np.int64) for r in self.regions))
        for m, members in enumerate(self.regions):
            if members.size == 0:
                raise ValueError(f"region {m} has no member points")

    @property
    def num_regions(self) -> int:
        return len(self.regions)

    def __len__(self) -> int:
        return self.group_of.shape[0]


def _pixel_hits(cloud: PointCloud, camera: CalibratedCamera, label_map: LabelMap,
                camera_index: int):
    """Point indices and the label-map ids under their floored pixels."""
    proj = project_points(cloud, camera.intrinsics, camera.extrinsic, camera_index)
    px = np.floor(proj.u).astype(np.int64)
    py = np.floor(proj.v).astype(np.int64)
    ids = label_map.labels[py, px]
    labeled = ids != UNLABELED
    return proj.point_index[labeled], ids[labeled]


def build_superpoints(cloud: PointCloud, cameras: list[CalibratedCamera],
                      maps: list[LabelMap]) -> SuperpointIndex:
    """Group cloud points by the superpixel their projection lands in.

    One LabelMap per camera, dimensions matching. A point visible in several
    cameras is assigned to the smallest camera index where it hits a labeled
    pixel. Regions are keyed by (camera index, superpixel id), ordered by that
    key; empty regions are dropped.
    """
    if len(cameras) != len(maps):
        raise ValueError(f"{len(cameras)} cameras but {len(maps)} label maps")
    for j, (cam, lmap) in enumerate(zip(cameras, maps)):
        if (lmap.height, lmap.width) != (cam.height, cam.width):
            raise ValueError(
                f"label map {j} is {lmap.height}x{lmap.width}, "
                f"camera expects {cam.height}x{cam.width}")

    n = len(cloud)
    assigned_cam = np.full(n, -1, dtype=np.int64)
    assigned_id = np.zeros(n, dtype=np.int64)
    for j, (cam, lmap) in enumerate(zip(cameras, maps)):
        points, ids = _pixel_hits(cloud, cam, lmap, j)
        fresh = points[assigned_cam[points] == -1]
        fresh_ids = ids[assigned_cam[points] == -1]
        assigned_cam[fresh] = j
        assigned_id[fresh] = fresh_ids.astype(np.int64)

    matched = np.flatnonzero(assigned_cam >= 0)
    keys = sorted({(int(assigned_cam[i]), int(assigned_id[i])) for i in matched})
    key_to_region = {key: m for m, key in enumerate(keys)}

    group_of = np.full(n, -1, dtype=np.int64)
    for i in matched:
        group_of[i] = key_to_region[(int(assigned_cam[i]), int(assigned_id[i]))]

    regions = tuple(np.flatnonzero(group_of == m) for m in range(len(keys)))
    areas = [maps[cam_idx].region_areas() for cam_idx in range(len(maps))]
    meta = tuple(RegionMeta(cam_idx, spx_id, areas[cam_idx][spx_id])
                 for cam_idx, spx_id in keys)
    return SuperpointIndex(group_of, regions, meta)


# ---------------------------------------------------------------------------
# View consistency alignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlignResult:
    """Outcome of cross-view class unification.

    class_maps carries one class-valued LabelMap per camera; instance_classes
    is the resolved instance -> class assignment; conflict count reflects the
    multi-view points whose hit pixels disagreed before alignment.
    """

    class_maps: tuple[LabelMap, ...]
    instance_classes: dict[int, int]
    num_conflict_points: int


def _multi_view_groups(maps, cloud, cameras):
    """Instance-id groups co-hit by each point visible in >= 2 cameras."""
    hits_per_point: dict[int, list[int]] = {}
    for j, (cam, lmap) in enumerate(zip(cameras, maps)):
        points, ids = _pixel_hits(cloud, cam, lmap, j)
        for p, g in zip(points.tolist(), ids.tolist()):
            hits_per_point.setdefault(p, []).append(g)
    return [ids for ids in hits_per_point.values() if len(ids) >= 2]


def align_views(maps: list[LabelMap], instance_classes: dict[int, int],
                cloud: PointCloud, cameras: list[CalibratedCamera]) -> AlignResult:
    """Unify instance classes that disagree across overlapping cameras.

    Points projecting into two or more cameras tie their hit instances
    together. Where the tied instances disagree in class, the whole connected
    group is relabeled to the class of its largest-area instance (pixel area
    summed over all cameras; area ties break toward the lower instance id).
    Resolution is computed once from the original maps, which makes the
    operation idempotent and leaves single-view regions untouched.

    maps are instance-valued; the returned maps are class-valued.
    """
    if len(cameras) != len(maps):
        raise ValueError(f"{len(cameras)} cameras but {len(maps)} label maps")

    areas: dict[int, int] = {}
    for lmap in maps:
        for gid, area in lmap.region_areas().items():
            areas[gid] = areas.get(gid, 0) + area
    for gid in areas:
        if gid not in instance_classes:
            raise ValueError(f"instance {gid} has no class assignment")

    groups = _multi_view_groups(maps, cloud, cameras)

    # Union-find over co-hit instances. Consistent groups participate too:
    # if one member of a group is relabeled, the rest must follow or the
    # group's point would end up conflicted.
    parent: dict[int, int] = {}

    def find(x):
        root = x
        while parent.get(root, root) != root:
            root = parent[root]
        while parent.get(x, x) != x:
            parent[x], x = root, parent[x]
        return root

    conflict_points = 0
    conflict_members = []
    for ids in groups:
        classes = {instance_classes[g] for g in ids}
        first = ids[0]
        for g in ids[1:]:
            ra, rb = find(first), find(g)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        if len(classes) > 1:
            conflict_points += 1
            conflict_members.append(first)

    resolved = dict(instance_classes)
    if conflict_members:
        # Roots are only stable once every union has been applied.
        conflicted_roots = {find(g) for g in conflict_members}
        components: dict[int, list[int]] = {}
        for g in set(x for ids in groups for x in ids):
            components.setdefault(find(g), []).append(g)
        for root, members in components.items():
            if root not in conflicted_roots:
                continue
            dominant = min(members, key=lambda g: (-areas.get(g, 0), g))
            for g in members:
                resolved[g] = instance_classes[dominant]

    class_maps = tuple(apply_instance_classes(lmap, resolved) for lmap in maps)
    return AlignResult(class_maps, resolved, conflict_points)


def apply_instance_classes(instance_map: LabelMap,
                           instance_classes: dict[int, int]) -> LabelMap:
    """Rewrite instance ids to class ids; unlabeled pixels stay unlabeled."""
    out = np.full(instance_map.labels.shape, UNLABELED, dtype=np.uint32)
    for gid in instance_map.region_ids():
        out[instance_map.labels == gid] = np.uint32(instance_classes[int(gid)])
    return LabelMap(out)


# ---------------------------------------------------------------------------
# Pooling and temporal matching
# ---------------------------------------------------------------------------


def pool_by_group(features: np.ndarray, index: SuperpointIndex) -> np.ndarray:
    """Mean-pool per-point feature rows into M region rows (index order)."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != len(index):
        raise ValueError(
            f"feature rows {features.shape[0]} do not match point count {len(index)}")
    pooled = np.empty((index.num_regions, features.shape[1]))
    for m, members in enumerate(index.regions):
        pooled[m] = features[members].mean(axis=0)
    return pooled


def pool_by_label_map(grid: np.ndarray, label_map: LabelMap):
    """Mean-pool an (H, W, C) grid over each labeled region of the map.

    Returns (pooled M x C, region ids ascending); regions with zero labeled
    pixels do not occur by construction of region_ids().
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape[:2] != (label_map.height, label_map.width):
        raise ValueError(
            f"grid {grid.shape[:2]} does not match map "
            f"{(label_map.height, label_map.width)}")
    ids = label_map.region_ids()
    pooled = np.empty((ids.shape[0], grid.shape[2]))
    for m, gid in enumerate(ids):
        mask = label_map.labels == gid
        pooled[m] = grid[mask].mean(axis=0)
    return pooled, ids


def pool_pixels_for_index(grids: list[np.ndarray], maps: list[LabelMap],
                          index: SuperpointIndex) -> np.ndarray:
    """Mean-pool per-camera (H, W, C) grids into rows aligned with ``index``.

    Row m pools the pixels of region m's superpixel in its own camera, so the
    output pairs elementwise with pool_by_group() of the matching point
    features.
    """
    channels = grids[0].shape[2]
    pooled = np.empty((index.num_regions, channels))
    for m, meta in enumerate(index.region_meta):
        mask = maps[meta.camera_index].labels == np.uint32(meta.superpixel_id)
        pooled[m] = grids[meta.camera_index][mask].mean(axis=0)
    return pooled


def match_regions(a: SuperpointIndex, b: SuperpointIndex) -> list[tuple[int, int]]:
    """Pair regions of two indices sharing (camera, superpixel id).

    Requires both indices to be built from label maps sharing an instance-id
    space (temporally tracked ids). Unmatched regions are dropped; pairs are
    sorted by (superpixel id, camera index).
    """
    key_a = {(m.camera_index, m.superpixel_id): i for i, m in enumerate(a.region_meta)}
    pairs = []
    for j, meta in enumerate(b.region_meta):
        i = key_a.get((meta.camera_index, meta.superpixel_id))
        if i is not None:
            pairs.append((meta.superpixel_id, meta.camera_index, i, j))
    return [(i, j) for _, _, i, j in sorted(pairs)]
