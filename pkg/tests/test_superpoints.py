import numpy as np
import pytest

from fusionpt import (CalibratedCamera, CameraIntrinsics, LabelMap, PointCloud,
                      RigidTransform, align_views, build_superpoints,
                      match_regions, pool_by_group, pool_by_label_map,
                      project_points)
from fusionpt.containers import UNLABELED
from fusionpt.superpoints import apply_instance_classes

from oracles import pool_oracle


def identity_cam(width=40, height=30, focal=20.0):
    mat = np.array([[focal, 0.0, width / 2.0],
                    [0.0, focal, height / 2.0],
                    [0.0, 0.0, 1.0]])
    return CalibratedCamera(CameraIntrinsics(mat, width, height),
                            RigidTransform.identity())


def uniform_map(cam, value):
    return LabelMap(np.full((cam.height, cam.width), value, dtype=np.uint32))


def point_at_pixel(cam, px, py, depth=5.0):
    """Sensor-frame point whose projection floors to pixel (px, py)."""
    k = cam.intrinsics.matrix
    x = (px + 0.5 - k[0, 2]) * depth / k[0, 0]
    y = (py + 0.5 - k[1, 2]) * depth / k[1, 1]
    return [x, y, depth]


def cross_view_conflicts(class_maps, cloud, cameras):
    """Count points whose labeled hits disagree in class across cameras."""
    per_point = {}
    for cam, lmap in zip(cameras, class_maps):
        proj = project_points(cloud, cam.intrinsics, cam.extrinsic)
        px = np.floor(proj.u).astype(int)
        py = np.floor(proj.v).astype(int)
        for p, cls in zip(proj.point_index, lmap.labels[py, px]):
            if cls != UNLABELED:
                per_point.setdefault(int(p), set()).add(int(cls))
    return sum(1 for classes in per_point.values() if len(classes) > 1)


class TestBuildSuperpoints:
    def test_uniform_single_camera(self, rng):
        cam = identity_cam()
        cloud = PointCloud(rng.uniform([-1, -1, 3], [1, 1, 8], size=(50, 3)))
        index = build_superpoints(cloud, [cam], [uniform_map(cam, 4)])
        in_frustum = len(project_points(cloud, cam.intrinsics, cam.extrinsic))
        assert index.num_regions == 1
        assert index.region_meta[0].superpixel_id == 4
        assert len(index.regions[0]) == in_frustum
        assert (index.group_of >= 0).sum() == in_frustum

    def test_nothing_in_frustum(self):
        cam = identity_cam()
        cloud = PointCloud([[0.0, 0.0, -5.0], [0.0, 0.0, -1.0]])
        index = build_superpoints(cloud, [cam], [uniform_map(cam, 1)])
        assert index.num_regions == 0
        assert (index.group_of == -1).all()

    def test_unlabeled_pixels_excluded(self):
        cam = identity_cam()
        labels = np.full((cam.height, cam.width), UNLABELED, dtype=np.uint32)
        labels[:, :cam.width // 2] = 3
        left = point_at_pixel(cam, 2, 10)
        right = point_at_pixel(cam, cam.width - 3, 10)
        index = build_superpoints(PointCloud([left, right]), [cam], [LabelMap(labels)])
        assert index.num_regions == 1
        np.testing.assert_array_equal(index.group_of, [0, -1])

    def test_smallest_camera_wins(self):
        cam = identity_cam()
        cloud = PointCloud([point_at_pixel(cam, 5, 5)])
        index = build_superpoints(cloud, [cam, cam],
                                  [uniform_map(cam, 7), uniform_map(cam, 9)])
        assert index.num_regions == 1
        meta = index.region_meta[0]
        assert meta.camera_index == 0 and meta.superpixel_id == 7

    def test_count_mismatch_rejected(self, rng):
        cam = identity_cam()
        with pytest.raises(ValueError, match="cameras but"):
            build_superpoints(PointCloud(rng.standard_normal((3, 3))),
                              [cam, cam], [uniform_map(cam, 1)])

    def test_map_dimension_mismatch_rejected(self, rng):
        cam = identity_cam()
        bad = LabelMap(np.zeros((4, 4), dtype=np.uint32))
        with pytest.raises(ValueError, match="camera expects"):
            build_superpoints(PointCloud(rng.standard_normal((3, 3))), [cam], [bad])

    def test_partition_and_purity_on_scene(self, small_scene):
        for frame in small_scene.frames:
            index = build_superpoints(frame.cloud, list(small_scene.cameras),
                                      list(frame.label_maps))
            seen = np.zeros(len(frame.cloud), dtype=int)
            for m, members in enumerate(index.regions):
                assert len(members) > 0
                seen[members] += 1
                np.testing.assert_array_equal(index.group_of[members], m)
                instances = np.unique(frame.gt_instance[members])
                assert instances.shape[0] == 1
                assert instances[0] == index.region_meta[m].superpixel_id
            assert seen.max() <= 1
            np.testing.assert_array_equal(seen == 0, index.group_of == -1)


class TestAlignViews:
    def two_cam_setup(self, areas, classes, hit_pairs, width=40, height=30):
        """Two coincident cameras with one painted instance per (cam, id).

        areas: {instance: (camera, pixel_area)}; hit_pairs: list of instance
        tuples that one shared point should co-hit.
        """
        cam = identity_cam(width, height)
        maps = [np.full((height, width), UNLABELED, dtype=np.uint32)
                for _ in range(2)]
        cursor = {0: 0, 1: 0}
        pixel_of = {}
        for gid, (cam_idx, area) in areas.items():
            start = cursor[cam_idx]
            flat = maps[cam_idx].reshape(-1)
            flat[start:start + area] = gid
            cursor[cam_idx] = start + area
            pixel_of[gid] = start  # flat index of the instance's first pixel
        points = []
        for pair in hit_pairs:
            # aim the point at the first pixel of pair[0]; repaint that pixel
            # in the other camera's map with pair[1]
            base = pixel_of[pair[0]]
            py, px = divmod(base, width)
            points.append(point_at_pixel(cam, px, py))
            other_cam = 1 - areas[pair[0]][0]
            maps[other_cam].reshape(-1)[base] = pair[1]
        return ([LabelMap(m) for m in maps], classes,
                PointCloud(points), [cam, cam])

    def test_no_conflict_is_identity(self, rng):
        maps, classes, cloud, cams = self.two_cam_setup(
            {1: (0, 100), 2: (1, 40)}, {1: 0, 2: 0}, [(1, 2)])
        result = align_views(maps, classes, cloud, cams)
        assert result.num_conflict_points == 0
        assert result.instance_classes == classes
        for lmap, aligned in zip(maps, result.class_maps):
            np.testing.assert_array_equal(
                aligned.labels, apply_instance_classes(lmap, classes).labels)

    def test_dominant_area_wins(self):
        # view A instance 1: area 200, class 0; view B instance 2: area 50,
        # class 1; one shared point -> B's instance relabeled to class 0
        maps, classes, cloud, cams = self.two_cam_setup(
            {1: (0, 200), 2: (1, 50)}, {1: 0, 2: 1}, [(1, 2)])
        result = align_views(maps, classes, cloud, cams)
        assert result.num_conflict_points == 1
        assert result.instance_classes == {1: 0, 2: 0}
        b_pixels = result.class_maps[1].labels[maps[1].labels == 2]
        assert (b_pixels == 0).all()

    def test_area_tie_lower_id_wins(self):
        maps, classes, cloud, cams = self.two_cam_setup(
            {3: (0, 80), 5: (1, 80)}, {3: 2, 5: 1}, [(3, 5)])
        result = align_views(maps, classes, cloud, cams)
        assert result.instance_classes == {3: 2, 5: 2}

    def test_conflict_chain_resolved_in_one_pass(self):
        # 1(A,100,class 0) - 2(B,50,class 1) - 3(A,200,class 2): the chain
        # forms one component whose dominant instance is 3
        maps, classes, cloud, cams = self.two_cam_setup(
            {1: (0, 100), 2: (1, 50), 3: (0, 200)}, {1: 0, 2: 1, 3: 2},
            [(1, 2), (3, 2)])
        result = align_views(maps, classes, cloud, cams)
        assert result.instance_classes == {1: 2, 2: 2, 3: 2}
        assert cross_view_conflicts(result.class_maps, cloud, cams) == 0

    def test_consistent_neighbor_follows_component(self):
        # 4 and 5 agree (class 0); 5 conflicts with larger 6 (class 1): the
        # consistent 4-5 link must follow or the 4-5 point would conflict
        maps, classes, cloud, cams = self.two_cam_setup(
            {4: (0, 30), 5: (1, 60), 6: (0, 300)}, {4: 0, 5: 0, 6: 1},
            [(4, 5), (6, 5)])
        result = align_views(maps, classes, cloud, cams)
        assert result.instance_classes == {4: 1, 5: 1, 6: 1}
        assert cross_view_conflicts(result.class_maps, cloud, cams) == 0

    def test_idempotent(self):
        maps, classes, cloud, cams = self.two_cam_setup(
            {1: (0, 100), 2: (1, 50), 3: (0, 200)}, {1: 0, 2: 1, 3: 2},
            [(1, 2), (3, 2)])
        first = align_views(maps, classes, cloud, cams)
        second = align_views(maps, first.instance_classes, cloud, cams)
        assert second.num_conflict_points == 0
        assert second.instance_classes == first.instance_classes
        for a, b in zip(first.class_maps, second.class_maps):
            np.testing.assert_array_equal(a.labels, b.labels)

    def test_missing_class_assignment_rejected(self):
        maps, classes, cloud, cams = self.two_cam_setup(
            {1: (0, 10), 2: (1, 10)}, {1: 0}, [(1, 2)])
        with pytest.raises(ValueError, match="no class assignment"):
            align_views(maps, classes, cloud, cams)

    @pytest.mark.parametrize("seed", range(25))
    def test_random_instances_align_clean(self, seed):
        rng = np.random.default_rng(seed)
        n_cams = int(rng.integers(2, 4))
        cam = identity_cam(32, 24)
        cams = [cam] * n_cams
        n_inst = int(rng.integers(2, 9))
        maps = []
        for _ in range(n_cams):
            labels = rng.integers(1, n_inst + 1, size=(24, 32)).astype(np.uint32)
            labels[rng.uniform(size=(24, 32)) < 0.3] = UNLABELED
            maps.append(LabelMap(labels))
        classes = {gid: int(rng.integers(0, 4)) for gid in range(1, n_inst + 1)}
        pts = [point_at_pixel(cam, int(rng.integers(0, 32)),
                              int(rng.integers(0, 24)))
               for _ in range(40)]
        cloud = PointCloud(pts)
        result = align_views(maps, classes, cloud, cams)
        assert cross_view_conflicts(result.class_maps, cloud, cams) == 0
        again = align_views(maps, result.instance_classes, cloud, cams)
        assert again.num_conflict_points == 0
        for a, b in zip(result.class_maps, again.class_maps):
            np.testing.assert_array_equal(a.labels, b.labels)


class TestPooling:
    def build_index(self, rng, n=20, m=4):
        cam = identity_cam()
        labels = rng.integers(0, m, size=(cam.height, cam.width)).astype(np.uint32)
        pts = [point_at_pixel(cam, int(rng.integers(0, cam.width)),
                              int(rng.integers(0, cam.height)))
               for _ in range(n)]
        return (build_superpoints(PointCloud(pts), [cam], [LabelMap(labels)]),
                n)

    def test_single_member_regions(self):
        cam = identity_cam()
        cloud = PointCloud([point_at_pixel(cam, 3, 3),
                            point_at_pixel(cam, 30, 20)])
        labels = np.full((cam.height, cam.width), UNLABELED, dtype=np.uint32)
        labels[3, 3] = 1
        labels[20, 30] = 2
        index = build_superpoints(cloud, [cam], [LabelMap(labels)])
        feats = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(pool_by_group(feats, index), feats)

    def test_two_member_mean(self):
        cam = identity_cam()
        cloud = PointCloud([point_at_pixel(cam, 3, 3, depth=4.0),
                            point_at_pixel(cam, 3, 3, depth=6.0)])
        index = build_superpoints(cloud, [cam], [uniform_map(cam, 1)])
        pooled = pool_by_group(np.array([[1.0, 0.0], [0.0, 1.0]]), index)
        np.testing.assert_array_equal(pooled, [[0.5, 0.5]])

    def test_matches_scalar_oracle(self, rng):
        index, n = self.build_index(rng)
        feats = rng.standard_normal((n, 6))
        pooled = pool_by_group(feats, index)
        expected = pool_oracle(feats, [list(r) for r in index.regions])
        assert np.abs(pooled - expected).max() < 1e-12

    def test_permutation_invariant_within_region(self, rng):
        index, n = self.build_index(rng)
        feats = rng.standard_normal((n, 3))
        base = pool_by_group(feats, index)
        # permute the points inside one region; pooled rows cannot change
        shuffled = feats.copy()
        members = index.regions[0]
        if len(members) > 1:
            shuffled[members] = feats[members[::-1]]
            after = pool_by_group(shuffled, index)
            assert np.abs(base - after).max() < 1e-12

    def test_row_count_mismatch_rejected(self, rng):
        index, n = self.build_index(rng)
        with pytest.raises(ValueError, match="do not match"):
            pool_by_group(rng.standard_normal((n + 1, 3)), index)

    def test_label_map_pooling(self, rng):
        labels = np.full((4, 5), UNLABELED, dtype=np.uint32)
        labels[0, :2] = 7
        labels[2, 2:4] = 2
        grid = rng.standard_normal((4, 5, 3))
        pooled, ids = pool_by_label_map(grid, LabelMap(labels))
        np.testing.assert_array_equal(ids, [2, 7])
        np.testing.assert_allclose(pooled[0], grid[2, 2:4].mean(axis=0), atol=1e-15)
        np.testing.assert_allclose(pooled[1], grid[0, :2].mean(axis=0), atol=1e-15)

    def test_label_map_grid_mismatch(self, rng):
        with pytest.raises(ValueError, match="does not match"):
            pool_by_label_map(rng.standard_normal((3, 3, 2)),
                              LabelMap(np.zeros((4, 5), dtype=np.uint32)))


class TestMatchRegions:
    def test_identical_indices_self_match(self, small_scene):
        frame = small_scene.frames[0]
        index = build_superpoints(frame.cloud, list(small_scene.cameras),
                                  list(frame.label_maps))
        pairs = match_regions(index, index)
        assert len(pairs) == index.num_regions
        assert all(i == j for i, j in pairs)

    def test_disjoint_ids_empty(self):
        cam = identity_cam()
        cloud = PointCloud([point_at_pixel(cam, 5, 5)])
        a = build_superpoints(cloud, [cam], [uniform_map(cam, 1)])
        b = build_superpoints(cloud, [cam], [uniform_map(cam, 2)])
        assert match_regions(a, b) == []

    def test_moving_object_displacement(self, small_scene):
        scene = small_scene
        f0, f1 = scene.frames[0], scene.frames[1]
        cams = list(scene.cameras)
        a = build_superpoints(f0.cloud, cams, list(f0.label_maps))
        b = build_superpoints(f1.cloud, cams, list(f1.label_maps))
        pairs = match_regions(a, b)
        assert pairs
        velocity = {obj.instance_id: obj.velocity for obj in scene.objects}
        checked = 0
        for i, j in pairs:
            gid = a.region_meta[i].superpixel_id
            centroid_a = f0.pose.apply(f0.cloud.coords[a.regions[i]]).mean(axis=0)
            centroid_b = f1.pose.apply(f1.cloud.coords[b.regions[j]]).mean(axis=0)
            expected = velocity[gid] * scene.timestep
            if len(a.regions[i]) < 30 or len(b.regions[j]) < 30:
                continue  # too few samples for a stable centroid
            np.testing.assert_allclose(centroid_b - centroid_a, expected,
                                       atol=0.35)
            checked += 1
        assert checked > 0
