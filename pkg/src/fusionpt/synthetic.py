"""Deterministic synthetic driving scenes with exact ground truth.

Scenes contain boxes and wall segments standing on a ground plane, a subset
moving with constant velocity, observed by a forward-moving ego rig of
pinhole cameras. Each frame resamples the object surfaces, so consecutive
frames look like independent LiDAR returns of the same instances.

Label maps are rendered with a per-pixel z-buffer over the frame's cloud
points plus a denser set of surface samples. Cloud points whose pixel ends
up owned by a different instance (occluded points) are dropped, so every
surviving point projects onto a pixel carrying its own instance id - the
ground-truth agreement every downstream association test relies on.

Feature grids encode one fixed random unit embedding per ground-truth class
plus seeded Gaussian noise, which makes cross-modal alignment learnable by
construction without being trivial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .containers import FeatureMap, LabelMap, SemanticScores, UNLABELED
from .geometry import (CalibratedCamera, CameraIntrinsics, PointCloud,
                       RigidTransform, compose)


@dataclass(frozen=True)
class SceneConfig:
    n_frames: int = 3
    n_objects: int = 4
    n_cameras: int = 2
    n_classes: int = 3
    timestep: float = 0.5
    points_per_object: int = 300
    dense_samples_per_object: int = 1500
    image_width: int = 160
    image_height: int = 120
    focal: float = 100.0
    rig_spread_deg: float = 50.0
    feature_stride: int = 4
    feature_dim: int = 32
    feature_noise: float = 0.05
    intensity_noise: float = 0.02
    ego_speed: float = 1.0
    ego_yaw_rate: float = 0.0
    moving_fraction: float = 0.5
    sensor_height: float = 1.7

    def validate(self) -> None:
        if self.n_frames < 1 or self.n_objects < 1 or self.n_cameras < 1:
            raise ValueError("scene needs at least one frame, object, and camera")
        if self.n_classes < 1:
            raise ValueError("scene needs at least one class")
        if self.image_width % self.feature_stride or self.image_height % self.feature_stride:
            raise ValueError("feature stride must divide the image dimensions")


@dataclass(frozen=True)
class ObjectSpec:
    instance_id: int
    class_id: int
    kind: str                  # "box" or "wall"
    center: np.ndarray         # world frame at frame 0, meters
    size: np.ndarray           # box: (lx, ly, lz); wall: (width, thickness~0, height)
    yaw: float
    velocity: np.ndarray       # world frame, m/s (z component 0)
    reflectivity: float

    def center_at(self, t: float) -> np.ndarray:
        return self.center + self.velocity * t


@dataclass(frozen=True)
class SceneFrame:
    cloud: PointCloud                      # sensor frame
    pose: RigidTransform                   # sensor -> world
    gt_class: np.ndarray                   # (N,) u32
    gt_instance: np.ndarray                # (N,) u32
    label_maps: tuple[LabelMap, ...]       # per camera, instance-valued
    feature_maps: tuple[FeatureMap, ...]   # per camera


@dataclass(frozen=True)
class SyntheticScene:
    frames: tuple[SceneFrame, ...]
    cameras: tuple[CalibratedCamera, ...]
    objects: tuple[ObjectSpec, ...]
    instance_classes: dict[int, int]
    class_embeddings: np.ndarray           # (n_classes + 1, E); last row = background
    timestep: float
    config: SceneConfig

    def relative_pose(self, src: int, dst: int) -> RigidTransform:
        """Transform mapping frame ``src`` sensor coords into frame ``dst``."""
        return compose(self.frames[dst].pose.inverse(), self.frames[src].pose)


def _camera_rig(config: SceneConfig) -> tuple[CalibratedCamera, ...]:
    intr = CameraIntrinsics(
        np.array([[config.focal, 0.0, config.image_width / 2.0],
                  [0.0, config.focal, config.image_height / 2.0],
                  [0.0, 0.0, 1.0]]),
        config.image_width, config.image_height)
    cams = []
    for j in range(config.n_cameras):
        phi = math.radians(config.rig_spread_deg) * j
        c, s = math.cos(phi), math.sin(phi)
        rot = np.array([[s, -c, 0.0],
                        [0.0, 0.0, -1.0],
                        [c, s, 0.0]])
        center = np.array([0.25 * c, 0.25 * s, -0.05])
        cams.append(CalibratedCamera(intr, RigidTransform(rot, -rot @ center)))
    return tuple(cams)


def _sample_objects(config: SceneConfig, rng: np.random.Generator) -> tuple[ObjectSpec, ...]:
    spread = math.radians(config.rig_spread_deg)
    # Keep objects inside the rig's combined field of view so most of them
    # are observed by at least one camera.
    azimuth_lo, azimuth_hi = -0.5, spread + 0.5
    n_moving = int(round(config.n_objects * config.moving_fraction))
    objects = []
    for i in range(config.n_objects):
        azimuth = rng.uniform(azimuth_lo, azimuth_hi)
        radius = rng.uniform(6.0, 16.0)
        kind = "box" if rng.uniform() < 0.6 else "wall"
        if kind == "box":
            size = rng.uniform([1.2, 1.2, 1.2], [3.0, 3.0, 2.4])
        else:
            size = np.array([rng.uniform(2.0, 4.0), 0.0, rng.uniform(1.6, 2.6)])
        if i < n_moving:
            heading = rng.uniform(0.0, 2.0 * math.pi)
            speed = rng.uniform(0.5, 1.5)
            velocity = np.array([speed * math.cos(heading), speed * math.sin(heading), 0.0])
        else:
            velocity = np.zeros(3)
        center = np.array([radius * math.cos(azimuth),
                           radius * math.sin(azimuth),
                           size[2] / 2.0])
        objects.append(ObjectSpec(
            instance_id=i + 1,
            class_id=i % config.n_classes,
            kind=kind,
            center=center,
            size=size,
            yaw=rng.uniform(0.0, 2.0 * math.pi),
            velocity=velocity,
            reflectivity=rng.uniform(0.2, 0.9),
        ))
    return tuple(objects)


def _surface_points(obj: ObjectSpec, t: float, count: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Uniform world-frame samples on the object's surface at scene time t."""
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if obj.kind == "wall":
        u = rng.uniform(-0.5, 0.5, size=count) * obj.size[0]
        w = rng.uniform(-0.5, 0.5, size=count) * obj.size[2]
        local = np.stack([u, np.zeros(count), w], axis=1)
    else:
        lx, ly, lz = obj.size
        areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])
        faces = rng.choice(6, size=count, p=areas / areas.sum())
        a = rng.uniform(-0.5, 0.5, size=count)
        b = rng.uniform(-0.5, 0.5, size=count)
        local = np.empty((count, 3))
        for face in range(6):
            mask = faces == face
            axis, sign = divmod(face, 2)
            fixed = (0.5 if sign == 0 else -0.5) * obj.size[axis]
            other = [i for i in range(3) if i != axis]
            local[mask, axis] = fixed
            local[mask, other[0]] = a[mask] * obj.size[other[0]]
            local[mask, other[1]] = b[mask] * obj.size[other[1]]
    return local @ rot.T + obj.center_at(t)


def _ego_pose(config: SceneConfig, frame: int) -> RigidTransform:
    t = frame * config.timestep
    yaw = config.ego_yaw_rate * t
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    trans = np.array([config.ego_speed * t, 0.0, config.sensor_height])
    return RigidTransform(rot, trans)


def _project_pixels(points: np.ndarray, cam: CalibratedCamera):
    """(kept mask, pixel x, pixel y, depth) for sensor-frame points."""
    cam_pts = cam.extrinsic.apply(points)
    z = cam_pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uvw = cam_pts @ cam.intrinsics.matrix.T
        u = uvw[:, 0] / z
        v = uvw[:, 1] / z
    keep = (z > 0.0) & (u >= 0.0) & (u < cam.width) & (v >= 0.0) & (v < cam.height)
    px = np.zeros(len(points), dtype=np.int64)
    py = np.zeros(len(points), dtype=np.int64)
    px[keep] = np.floor(u[keep]).astype(np.int64)
    py[keep] = np.floor(v[keep]).astype(np.int64)
    return keep, px, py, z


def _rasterize(points: np.ndarray, ids: np.ndarray, cam: CalibratedCamera) -> LabelMap:
    """Depth-buffered instance raster; nearest candidate owns each pixel."""
    keep, px, py, depth = _project_pixels(points, cam)
    sel = np.flatnonzero(keep)
    labels = np.full((cam.height, cam.width), UNLABELED, dtype=np.uint32)
    if sel.size:
        flat = py[sel] * cam.width + px[sel]
        order = np.lexsort((sel, depth[sel], flat))
        uniq, first = np.unique(flat[order], return_index=True)
        winners = sel[order][first]
        labels.reshape(-1)[uniq] = ids[winners]
    return LabelMap(labels)


def _feature_grid(label_map: LabelMap, instance_classes: dict[int, int],
                  class_embeddings: np.ndarray, config: SceneConfig,
                  rng: np.random.Generator) -> FeatureMap:
    stride = config.feature_stride
    gh = config.image_height // stride
    gw = config.image_width // stride
    centers = label_map.labels[stride // 2::stride, stride // 2::stride][:gh, :gw]
    emb_index = np.full(centers.shape, class_embeddings.shape[0] - 1, dtype=np.int64)
    for gid in np.unique(centers):
        if gid != UNLABELED:
            emb_index[centers == gid] = instance_classes[int(gid)]
    grid = class_embeddings[emb_index]
    grid = grid + config.feature_noise * rng.standard_normal(grid.shape)
    return FeatureMap(grid)


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> SyntheticScene:
    """Deterministically build a scene: same (seed, config) -> same bytes."""
    config.validate()
    rng = np.random.default_rng(seed)

    cameras = _camera_rig(config)
    objects = _sample_objects(config, rng)
    instance_classes = {obj.instance_id: obj.class_id for obj in objects}

    embeddings = rng.standard_normal((config.n_classes + 1, config.feature_dim))
    embeddings /= np.linalg.norm(embeddings, axis=1, keepdims=True)

    frames = []
    for f in range(config.n_frames):
        t = f * config.timestep
        pose = _ego_pose(config, f)
        world_to_sensor = pose.inverse()

        cloud_pts, cloud_ids, cloud_cls, cloud_refl = [], [], [], []
        dense_pts, dense_ids = [], []
        for obj in objects:
            pts = _surface_points(obj, t, config.points_per_object, rng)
            cloud_pts.append(world_to_sensor.apply(pts))
            cloud_ids.append(np.full(len(pts), obj.instance_id, dtype=np.uint32))
            cloud_cls.append(np.full(len(pts), obj.class_id, dtype=np.uint32))
            noise = config.intensity_noise * rng.standard_normal(len(pts))
            cloud_refl.append(np.clip(obj.reflectivity + noise, 0.0, 1.0))
            hull = _surface_points(obj, t, config.dense_samples_per_object, rng)
            dense_pts.append(world_to_sensor.apply(hull))
            dense_ids.append(np.full(len(hull), obj.instance_id, dtype=np.uint32))

        points = np.concatenate(cloud_pts)
        ids = np.concatenate(cloud_ids)
        classes = np.concatenate(cloud_cls)
        refl = np.concatenate(cloud_refl)
        raster_pts = np.concatenate([points] + dense_pts)
        raster_ids = np.concatenate([ids] + dense_ids)

        label_maps = tuple(_rasterize(raster_pts, raster_ids, cam) for cam in cameras)

        # Drop occluded points: a surviving point's pixel in every camera
        # must carry the point's own instance id.
        visible = np.ones(len(points), dtype=bool)
        for cam, lmap in zip(cameras, label_maps):
            keep, px, py, _ = _project_pixels(points, cam)
            hit = np.flatnonzero(keep)
            owner = lmap.labels[py[hit], px[hit]]
            visible[hit[owner != ids[hit]]] = False

        feature_maps = tuple(
            _feature_grid(lmap, instance_classes, embeddings, config, rng)
            for lmap in label_maps)

        frames.append(SceneFrame(
            cloud=PointCloud(points[visible], refl[visible][:, None], timestamp=t),
            pose=pose,
            gt_class=classes[visible],
            gt_instance=ids[visible],
            label_maps=label_maps,
            feature_maps=feature_maps,
        ))

    return SyntheticScene(tuple(frames), cameras, objects, instance_classes,
                          embeddings, config.timestep, config)


def synthetic_scores(gt_class: np.ndarray, num_classes: int, noise_rate: float,
                     rng: np.random.Generator, peak: float = 0.9) -> SemanticScores:
    """Peaked per-point probability rows around the ground-truth class.

    With probability ``noise_rate`` a row's peak moves to a uniformly chosen
    wrong class, mimicking per-frame misclassifications.
    """
    gt_class = np.asarray(gt_class, dtype=np.int64)
    n = gt_class.shape[0]
    if num_classes < 2:
        raise ValueError("need at least two classes for peaked scores")
    peaked = gt_class.copy()
    flip = rng.uniform(size=n) < noise_rate
    offsets = rng.integers(1, num_classes, size=n)
    peaked[flip] = (peaked[flip] + offsets[flip]) % num_classes
    rest = (1.0 - peak) / (num_classes - 1)
    rows = np.full((n, num_classes), rest)
    rows[np.arange(n), peaked] = peak
    return SemanticScores(rows, probabilities=True)
