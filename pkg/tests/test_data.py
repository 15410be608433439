"""Data tests: analytic oracle geometry, pose sampling, PNG round trips."""

import math
import os

import numpy as np
import pytest

from fieldgan.data import (Dataset, PoseDistribution, SceneSpec, load_dataset,
                           load_png, make_dataset, oracle_render, pose_from_angles,
                           sample_pose, save_dataset, save_png)
from fieldgan.errors import ContractError


class TestSceneSpec:
    def test_bound_enforced(self):
        with pytest.raises(ContractError):
            SceneSpec(primitive="sphere", center=(0.8, 0.0, 0.0), size=0.5)
        with pytest.raises(ContractError):
            SceneSpec(primitive="two_spheres", center=(0.0, 0.0, 0.0), size=0.7)

    def test_unknown_primitive(self):
        with pytest.raises(ContractError):
            SceneSpec(primitive="torus")


class TestOracleRender:
    def test_zero_radius_is_pure_background(self):
        scene = SceneSpec(size=0.0, background=(0.1, 0.2, 0.3))
        img = oracle_render(scene, pose_from_angles(0.5, 0.2, PoseDistribution()), 16)
        assert np.array_equal(img, np.broadcast_to([0.1, 0.2, 0.3], (16, 16, 3)))

    def test_centered_sphere_symmetric_disc(self):
        scene = SceneSpec(size=0.5, albedo=(0.0, 0.0, 1.0))
        pose = pose_from_angles(0.0, 0.0, PoseDistribution())
        img = oracle_render(scene, pose, 33)
        mask = img[:, :, 0] < 0.5  # albedo red 0 vs white background
        assert mask.any() and not mask.all()
        assert np.array_equal(mask, mask[:, ::-1])  # left-right symmetry
        assert np.array_equal(mask, mask[::-1, :])  # top-bottom symmetry
        assert mask[16, 16]  # center pixel hits

    def test_projected_silhouette_radius(self):
        # angular radius asin(r/d); pixel radius via the pinhole model
        scene = SceneSpec(size=0.5, albedo=(1.0, 0.0, 0.0), background=(1.0, 1.0, 1.0))
        dist, size = 2.0, 64
        pd = PoseDistribution(radius=dist)
        pose = pose_from_angles(0.0, 0.0, pd)
        img = oracle_render(scene, pose, size)
        mask = img[:, :, 1] < 0.5
        beta = math.asin(0.5 / dist)
        expected_px = math.tan(beta) / math.tan(pose.vertical_fov / 2) * (size / 2)
        counted_px = math.sqrt(mask.sum() / math.pi)
        assert abs(counted_px - expected_px) < 1.0

    def test_box_and_composite_render(self):
        for prim in ("box", "two_spheres"):
            scene = SceneSpec(primitive=prim, size=0.4, albedo=(0.2, 0.9, 0.2))
            img = oracle_render(scene, pose_from_angles(0.4, 0.2, PoseDistribution()), 24)
            mask = img[:, :, 0] < 0.5  # albedo red 0.2 vs white background
            assert 0.0 < mask.mean() < 1.0, prim

    def test_rotation_consistency(self):
        # rotating the composite scene and the camera by the same x-axis
        # rotation leaves the image unchanged
        def rot_x(v, quarter_turns):
            c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][quarter_turns % 4]
            x, y, z = v
            return np.array([x, c * y - s * z, s * y + c * z], dtype=float)

        center = (0.1, 0.2, -0.1)
        base = SceneSpec(primitive="two_spheres", center=center, size=0.3,
                         albedo=(0.9, 0.1, 0.1))
        pd = PoseDistribution()
        pose = pose_from_angles(0.8, 0.35, pd)
        reference = oracle_render(base, pose, 24)
        for q in (1, 2, 3):
            scene_r = SceneSpec(primitive="two_spheres",
                                center=tuple(rot_x(np.array(center), q)), size=0.3,
                                albedo=(0.9, 0.1, 0.1))
            pose_r = pose_from_angles(0.8, 0.35, pd)
            pose_r.position = rot_x(pose.position, q)
            pose_r.look_at = rot_x(pose.look_at, q)
            pose_r.up = rot_x(pose.up, q)
            assert np.allclose(oracle_render(scene_r, pose_r, 24), reference,
                               atol=1e-12), q


class TestSamplePose:
    def test_single_axis_constant_elevation(self):
        pd = PoseDistribution(mode="single_axis", radius=2.0)
        rng = np.random.default_rng(0)
        for _ in range(50):
            pose = sample_pose(pd, rng)
            assert abs(pose.position[2]) < 1e-12
            assert abs(np.linalg.norm(pose.position) - 2.0) < 1e-9

    def test_single_axis_grid_positions(self):
        pd = PoseDistribution(mode="single_axis")
        assert pd.n_azimuth_steps() == 72
        rng = np.random.default_rng(1)
        step = pd.axis_step
        for _ in range(40):
            pose = sample_pose(pd, rng)
            az = math.atan2(pose.position[1], pose.position[0]) % (2 * math.pi)
            k = az / step
            assert abs(k - round(k)) < 1e-9

    def test_sector_degenerate_elevation(self):
        pd = PoseDistribution(elevation_lo=0.0, elevation_hi=0.0)
        rng = np.random.default_rng(2)
        for _ in range(20):
            assert abs(sample_pose(pd, rng).position[2]) < 1e-12

    def test_single_axis_azimuths_nearly_uniform(self):
        pd = PoseDistribution(mode="single_axis")
        rng = np.random.default_rng(3)
        n, bins = 10_000, 72
        counts = np.zeros(bins)
        for _ in range(n):
            pose = sample_pose(pd, rng)
            az = math.atan2(pose.position[1], pose.position[0]) % (2 * math.pi)
            counts[int(round(az / pd.axis_step)) % bins] += 1
        expected = n / bins
        sigma = math.sqrt(n * (1 / bins) * (1 - 1 / bins))
        # chi-square style: bound the total statistic and the worst bin
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 110.0  # ~p99 critical value for 71 dof
        assert np.all(np.abs(counts - expected) < 4.0 * sigma)


class TestMakeDataset:
    def test_single_item(self):
        ds = make_dataset(1, PoseDistribution(), size=8, seed=0)
        assert len(ds) == 1 and ds.items[0].image.shape == (8, 8, 3)

    def test_seed_reproducible(self):
        a = make_dataset(5, PoseDistribution(), size=12, seed=9)
        b = make_dataset(5, PoseDistribution(), size=12, seed=9)
        for ia, ib in zip(a.items, b.items):
            assert np.array_equal(ia.image, ib.image)

    def test_color_randomization_centered(self):
        ds = make_dataset(1000, PoseDistribution(), randomize=("color",), size=6, seed=1)
        fg = []
        for item in ds.items:
            mask = np.any(item.image != 1.0, axis=2)
            if mask.any():
                fg.append(item.image[mask].mean(axis=0))
        mean_fg = np.mean(fg, axis=0)
        assert np.abs(mean_fg - 0.5).max() < 0.05

    def test_images_have_foreground_and_background(self):
        ds = make_dataset(10, PoseDistribution(), size=16, seed=2)
        for item in ds.items:
            mask = np.any(item.image != 1.0, axis=2)
            assert 0.0 < mask.mean() < 1.0


class TestPngIO:
    def test_round_trip_quantization_bound(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, size=(9, 7, 3))
        path = str(tmp_path / "x.png")
        save_png(img, path)
        back = load_png(path)
        assert np.abs(back - img).max() <= 1.0 / 255.0 + 1e-12

    def test_requantization_is_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        img = np.round(rng.uniform(0, 1, size=(5, 5, 3)) * 255) / 255.0
        path = str(tmp_path / "q.png")
        save_png(img, path)
        assert np.array_equal(load_png(path), img)

    def test_grayscale_replicated(self, tmp_path):
        from PIL import Image

        arr = np.arange(16, dtype=np.uint8).reshape(4, 4) * 16
        path = str(tmp_path / "g.png")
        Image.fromarray(arr, mode="L").save(path)
        img = load_png(path)
        assert img.shape == (4, 4, 3)
        assert np.array_equal(img[:, :, 0], img[:, :, 1])
        assert np.array_equal(img[:, :, 0], img[:, :, 2])

    def test_solid_color_fixture(self, tmp_path):
        # fixture written by PIL directly, decoded by load_png
        from PIL import Image

        path = str(tmp_path / "solid.png")
        Image.new("RGB", (2, 2), (51, 102, 204)).save(path)
        img = load_png(path)
        assert np.allclose(img, np.broadcast_to([51 / 255, 102 / 255, 204 / 255],
                                                (2, 2, 3)))

    def test_missing_file(self):
        with pytest.raises(IOError):
            load_png("/nonexistent/image.png")


class TestManifest:
    def test_dataset_round_trip(self, tmp_path):
        ds = make_dataset(4, PoseDistribution(mode="single_axis"), size=8, seed=3)
        manifest = save_dataset(ds, str(tmp_path / "d"))
        back = load_dataset(manifest)
        assert len(back) == 4
        assert back.image_size == 8
        assert back.provenance == "png_dir"
        assert back.pose_dist.mode == "single_axis"
        for a, b in zip(ds.items, back.items):
            assert np.abs(a.image - b.image).max() <= 1.0 / 255.0 + 1e-12

    def test_missing_manifest(self):
        with pytest.raises(IOError):
            load_dataset("/nonexistent/manifest.json")
