"""Synthetic shape generation: distance fields, rasterization, file IO."""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from vox2surf import synthdata as sy


def fibonacci_sphere(n):
    i = np.arange(n)
    golden = (1.0 + 5.0**0.5) / 2.0
    z = 1.0 - (2.0 * i + 1.0) / n
    theta = 2.0 * np.pi * i / golden
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=-1)


def super_surface_cloud(radii, exponent, n=400_000):
    """Radial projection of a Fibonacci sphere onto the level-1 set."""
    dirs = fibonacci_sphere(n)
    w = np.asarray(radii) ** -exponent
    t = ((w * np.abs(dirs) ** exponent).sum(axis=1)) ** (-1.0 / exponent)
    return dirs * t[:, None]


def brute_signed_distance(spec, pts, cloud):
    """Signed distance against a dense on-surface point cloud."""
    local = sy._to_local(spec, pts)
    dist, _ = cKDTree(cloud).query(local, k=1)
    if spec.kind == "ellipsoid":
        inside = ((local / np.asarray(spec.radii)) ** 2).sum(axis=1) < 1.0
    else:
        inside = sy._super_level(local, np.asarray(spec.radii), spec.exponent) < 0.0
    return np.where(inside, -dist, dist)


class TestShapeSpecValidation:
    def test_negative_radius_rejected(self):
        with pytest.raises(ValueError):
            sy.ShapeSpec(kind="ellipsoid", radii=(0.5, -0.2, 0.4))

    def test_zero_radius_rejected(self):
        with pytest.raises(ValueError):
            sy.ShapeSpec(kind="superellipsoid", radii=(0.5, 0.0, 0.4))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            sy.ShapeSpec(kind="torus")

    def test_exponent_range(self):
        with pytest.raises(ValueError):
            sy.ShapeSpec(kind="superellipsoid", exponent=1.5)
        with pytest.raises(ValueError):
            sy.ShapeSpec(kind="superellipsoid", exponent=9.0)

    def test_blob_needs_two_spheres(self):
        with pytest.raises(ValueError):
            sy.ShapeSpec(kind="blob", centers=((0.0, 0.0, 0.0),), sphere_radii=(0.3,))

    def test_blob_caps_at_four_spheres(self):
        centers = tuple((0.1 * k, 0.0, 0.0) for k in range(5))
        with pytest.raises(ValueError):
            sy.ShapeSpec(kind="blob", centers=centers, sphere_radii=(0.2,) * 5)

    def test_blob_radii_must_match_centers(self):
        with pytest.raises(ValueError):
            sy.ShapeSpec(
                kind="blob",
                centers=((0.0, 0.0, 0.0), (0.3, 0.0, 0.0)),
                sphere_radii=(0.2,),
            )

    def test_blob_blend_positive(self):
        with pytest.raises(ValueError):
            sy.ShapeSpec(
                kind="blob",
                centers=((0.0, 0.0, 0.0), (0.3, 0.0, 0.0)),
                sphere_radii=(0.2, 0.2),
                blend=0.0,
            )

    def test_rotation_must_be_orthonormal(self):
        with pytest.raises(ValueError):
            sy.ShapeSpec(kind="ellipsoid", rotation=tuple(float(v) for v in range(9)))

    def test_rotation_size_checked(self):
        with pytest.raises(ValueError):
            sy.ShapeSpec(kind="ellipsoid", rotation=(1.0, 0.0, 0.0))

    def test_center_size_checked(self):
        with pytest.raises(ValueError):
            sy.ShapeSpec(kind="ellipsoid", center=(0.0, 0.0))


class TestSphereDistance:
    def test_matches_closed_form(self):
        spec = sy.ShapeSpec(kind="ellipsoid", radii=(0.5, 0.5, 0.5))
        pts = np.random.default_rng(0).uniform(-1.0, 1.0, size=(2000, 3))
        got = sy.signed_distance(spec, pts)
        want = np.sqrt((pts**2).sum(axis=1)) - 0.5
        assert np.abs(got - want).max() < 1e-12

    def test_shifted_sphere(self):
        spec = sy.ShapeSpec(kind="ellipsoid", radii=(0.3, 0.3, 0.3), center=(0.2, -0.1, 0.05))
        pts = np.random.default_rng(1).uniform(-1.0, 1.0, size=(500, 3))
        want = np.sqrt(((pts - np.array([0.2, -0.1, 0.05])) ** 2).sum(axis=1)) - 0.3
        assert np.abs(sy.signed_distance(spec, pts) - want).max() < 1e-12


class TestEllipsoidDistance:
    def setup_method(self):
        rng = np.random.default_rng(11)
        self.rot = sy.random_rotation(rng)
        self.spec = sy.ShapeSpec(
            kind="ellipsoid", radii=(0.62, 0.41, 0.28), rotation=self.rot,
            center=(0.05, -0.08, 0.03),
        )
        self.rng = rng

    def test_against_dense_surface_cloud(self):
        # oracle resolution limits the tolerance here; the sphere case
        # above pins the exact values
        theta = np.linspace(0.0, np.pi, 900)
        phi = np.linspace(0.0, 2.0 * np.pi, 1800, endpoint=False)
        T, P = np.meshgrid(theta, phi, indexing="ij")
        a, b, c = self.spec.radii
        cloud = np.stack(
            [a * np.sin(T) * np.cos(P), b * np.sin(T) * np.sin(P), c * np.cos(T)],
            axis=-1,
        ).reshape(-1, 3)
        pts = self.rng.uniform(-0.9, 0.9, size=(800, 3))
        got = sy.signed_distance(self.spec, pts)
        want = brute_signed_distance(self.spec, pts, cloud)
        assert np.abs(got - want).max() < 2e-3

    def test_foot_sits_on_surface(self):
        pts = self.rng.uniform(-0.9, 0.9, size=(400, 3))
        foot = sy.surface_foot(self.spec, pts)
        level = ((sy._to_local(self.spec, foot) / np.asarray(self.spec.radii)) ** 2).sum(axis=1)
        assert np.abs(level - 1.0).max() < 1e-9

    def test_foot_is_perpendicular(self):
        # query minus foot must align with the surface normal at the foot
        pts = self.rng.uniform(-0.9, 0.9, size=(300, 3))
        foot = sy.surface_foot(self.spec, pts)
        lq = sy._to_local(self.spec, pts)
        lf = sy._to_local(self.spec, foot)
        offset = lq - lf
        normal = 2.0 * lf / np.asarray(self.spec.radii) ** 2
        cross = np.cross(offset, normal)
        denom = np.linalg.norm(offset, axis=1) * np.linalg.norm(normal, axis=1)
        keep = denom > 1e-9
        assert (np.linalg.norm(cross[keep], axis=1) / denom[keep]).max() < 1e-6

    def test_pose_moves_the_field(self):
        plain = sy.ShapeSpec(kind="ellipsoid", radii=(0.62, 0.41, 0.28))
        pts = self.rng.uniform(-0.8, 0.8, size=(300, 3))
        rot = np.asarray(self.rot).reshape(3, 3)
        local = (pts - np.array([0.05, -0.08, 0.03])) @ rot.T
        a = sy.signed_distance(self.spec, pts)
        b = sy.signed_distance(plain, local)
        assert np.abs(a - b).max() < 1e-12


class TestSuperellipsoidDistance:
    def test_quadratic_case_matches_independent_solver(self):
        # exponent 2 must agree with the ellipsoid bisection route, which
        # is a different algorithm entirely
        rng = np.random.default_rng(5)
        for _ in range(3):
            radii = tuple(rng.uniform(0.3, 0.65, size=3).tolist())
            rot = sy.random_rotation(rng)
            center = tuple(rng.uniform(-0.1, 0.1, size=3).tolist())
            se = sy.ShapeSpec(kind="superellipsoid", radii=radii, exponent=2.0,
                              rotation=rot, center=center)
            el = sy.ShapeSpec(kind="ellipsoid", radii=radii, rotation=rot, center=center)
            pts = rng.uniform(-0.9, 0.9, size=(600, 3))
            diff = sy.signed_distance(se, pts) - sy.signed_distance(el, pts)
            assert np.abs(diff).max() < 1e-9

    @pytest.mark.parametrize("exponent", [2.5, 4.0, 5.0])
    def test_against_dense_surface_cloud(self, exponent):
        rng = np.random.default_rng(int(exponent * 10))
        spec = sy.ShapeSpec(
            kind="superellipsoid", radii=(0.55, 0.45, 0.35), exponent=exponent,
            rotation=sy.random_rotation(rng),
        )
        cloud = super_surface_cloud(spec.radii, exponent)
        pts = rng.uniform(-0.8, 0.8, size=(1500, 3))
        got = sy.signed_distance(spec, pts)
        want = brute_signed_distance(spec, pts, cloud)
        outside = want > 0.0
        shallow = (want <= 0.0) & (want > -0.06)
        assert np.abs(got - want)[outside].max() < 3e-3
        assert np.abs(got - want)[shallow].max() < 3e-3

    def test_foot_sits_on_surface(self):
        rng = np.random.default_rng(9)
        spec = sy.ShapeSpec(kind="superellipsoid", radii=(0.5, 0.42, 0.33), exponent=4.0)
        pts = rng.uniform(-0.9, 0.9, size=(500, 3))
        foot = sy.surface_foot(spec, pts)
        level = sy._super_level(sy._to_local(spec, foot), np.asarray(spec.radii), 4.0)
        assert np.abs(level).max() < 1e-9

    def test_outside_distance_never_beats_surface_samples(self):
        # any surface point upper-bounds the true distance, so the solver
        # may not come in more than oracle resolution below the cloud
        rng = np.random.default_rng(13)
        spec = sy.ShapeSpec(kind="superellipsoid", radii=(0.5, 0.4, 0.3), exponent=5.0)
        cloud = super_surface_cloud(spec.radii, 5.0)
        pts = rng.uniform(-0.95, 0.95, size=(2000, 3))
        sd = sy.signed_distance(spec, pts)
        ref = brute_signed_distance(spec, pts, cloud)
        out = ref > 0.0
        assert (sd[out] <= ref[out] + 1e-9).all()


class TestBlobDistance:
    def setup_method(self):
        self.spec = sy.ShapeSpec(
            kind="blob",
            centers=((-0.25, 0.0, 0.05), (0.2, 0.1, -0.05), (0.45, -0.15, 0.1)),
            sphere_radii=(0.3, 0.25, 0.2),
            blend=0.1,
        )

    def sphere_distances(self, pts):
        centers = np.asarray(self.spec.centers)
        radii = np.asarray(self.spec.sphere_radii)
        return np.sqrt(((pts[:, None, :] - centers[None]) ** 2).sum(-1)) - radii[None]

    def test_equals_min_far_from_blends(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-1.0, 1.0, size=(4000, 3))
        d = self.sphere_distances(pts)
        srt = np.sort(d, axis=1)
        clear = srt[:, 1] - srt[:, 0] > 2.0 * self.spec.blend + 1e-6
        got = sy.signed_distance(self.spec, pts)
        assert np.abs(got[clear] - srt[clear, 0]).max() < 1e-12

    def test_bounded_by_min(self):
        # smooth union stays within k/4 below the plain min and never above
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1.0, 1.0, size=(4000, 3))
        got = sy.signed_distance(self.spec, pts)
        plain = self.sphere_distances(pts).min(axis=1)
        assert (got <= plain + 1e-12).all()
        assert (got >= plain - self.spec.blend / 2.0 - 1e-12).all()

    def test_random_chains_stay_valid(self):
        for seed in range(20):
            spec = sy.random_blob_spec(np.random.default_rng(seed))
            centers = np.asarray(spec.centers)
            radii = np.asarray(spec.sphere_radii)
            n = centers.shape[0]
            assert 2 <= n <= 4
            for i in range(n - 1):
                gap = np.linalg.norm(centers[i + 1] - centers[i])
                assert gap < 0.9 * (radii[i] + radii[i + 1])
            for i in range(n):
                assert np.abs(centers[i]).max() + radii[i] <= 0.85 + 1e-12
                for j in range(i + 2, n):
                    dist = np.linalg.norm(centers[i] - centers[j])
                    assert dist >= radii[i] + radii[j] + 2.0 * spec.blend + 0.05 - 1e-12


class TestEikonalProperty:
    def check(self, spec, base, offsets, tol=1e-3):
        grad = sy.sdf_gradient(spec, base + offsets, h=1e-4)
        norms = np.sqrt((grad * grad).sum(axis=1))
        assert np.abs(norms - 1.0).max() < tol

    def surface_points(self, spec, count, seed):
        rng = np.random.default_rng(seed)
        pts = []
        while sum(p.shape[0] for p in pts) < count:
            cand = rng.uniform(-0.9, 0.9, size=(4000, 3))
            keep = cand[np.abs(sy.signed_distance(spec, cand)) < 0.05]
            pts.append(keep)
        base = np.concatenate(pts)[:count]
        return sy.surface_foot(spec, base)

    def test_ellipsoid(self):
        spec = sy.ShapeSpec(kind="ellipsoid", radii=(0.6, 0.45, 0.3))
        foot = self.surface_points(spec, 300, 0)
        normal = sy.sdf_gradient(spec, foot)
        for delta in (-0.05, -0.02, 0.02, 0.05):
            self.check(spec, foot, delta * normal)

    def test_superellipsoid(self):
        spec = sy.ShapeSpec(kind="superellipsoid", radii=(0.55, 0.45, 0.35), exponent=4.0)
        foot = self.surface_points(spec, 300, 1)
        normal = sy.sdf_gradient(spec, foot)
        for delta in (-0.03, 0.03, 0.08):
            self.check(spec, foot, delta * normal)

    def test_blob_off_blend(self):
        spec = sy.ShapeSpec(
            kind="blob",
            centers=((-0.2, 0.0, 0.0), (0.25, 0.05, 0.0)),
            sphere_radii=(0.3, 0.24),
            blend=0.1,
        )
        foot = self.surface_points(spec, 500, 2)
        centers = np.asarray(spec.centers)
        radii = np.asarray(spec.sphere_radii)
        d = np.sqrt(((foot[:, None, :] - centers[None]) ** 2).sum(-1)) - radii[None]
        srt = np.sort(d, axis=1)
        foot = foot[srt[:, 1] - srt[:, 0] > 2.0 * spec.blend + 0.05]
        normal = sy.sdf_gradient(spec, foot)
        for delta in (-0.03, 0.03):
            self.check(spec, foot, delta * normal)


class TestLipschitz:
    @settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.integers(min_value=0, max_value=10_000))
    def test_ellipsoid_contraction(self, seed):
        rng = np.random.default_rng(seed)
        spec = sy.ShapeSpec(kind="ellipsoid", radii=(0.6, 0.42, 0.31))
        p = rng.uniform(-1.0, 1.0, size=(64, 3))
        q = rng.uniform(-1.0, 1.0, size=(64, 3))
        dp = sy.signed_distance(spec, p)
        dq = sy.signed_distance(spec, q)
        gap = np.sqrt(((p - q) ** 2).sum(axis=1))
        assert (np.abs(dp - dq) <= gap + 1e-9).all()

    @settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.integers(min_value=0, max_value=10_000))
    def test_blob_contraction(self, seed):
        rng = np.random.default_rng(seed)
        spec = sy.ShapeSpec(
            kind="blob",
            centers=((-0.2, 0.0, 0.0), (0.2, 0.1, -0.05)),
            sphere_radii=(0.28, 0.22),
            blend=0.09,
        )
        p = rng.uniform(-1.0, 1.0, size=(64, 3))
        q = rng.uniform(-1.0, 1.0, size=(64, 3))
        dp = sy.signed_distance(spec, p)
        dq = sy.signed_distance(spec, q)
        gap = np.sqrt(((p - q) ** 2).sum(axis=1))
        assert (np.abs(dp - dq) <= gap + 1e-9).all()


class TestGenerate:
    def test_sphere_label_count_matches_volume(self):
        spec = sy.ShapeSpec(kind="ellipsoid", radii=(0.5, 0.5, 0.5))
        sample = sy.generate(spec, 32, 0.0, 0)
        count = float(sample.labels.data.sum())
        expected = 4.0 / 3.0 * np.pi * 0.5**3 * 16**3
        assert abs(count - expected) / expected < 0.02

    def test_zero_noise_intensities(self):
        spec = sy.ShapeSpec(kind="ellipsoid", radii=(0.4, 0.5, 0.45))
        sample = sy.generate(spec, 16, 0.0, 3)
        values = np.unique(sample.volume.data)
        assert set(values.tolist()) <= {0.0, sy.FOREGROUND}

    def test_noise_clipped_to_unit_range(self):
        spec = sy.ShapeSpec(kind="ellipsoid", radii=(0.4, 0.5, 0.45))
        sample = sy.generate(spec, 16, 0.5, 3)
        assert sample.volume.data.min() >= 0.0
        assert sample.volume.data.max() <= 1.0

    def test_identical_seeds_bit_identical(self):
        spec = sy.ShapeSpec(kind="superellipsoid", radii=(0.5, 0.4, 0.35), exponent=3.0)
        a = sy.generate(spec, 16, 0.03, 17, n_points=256)
        b = sy.generate(spec, 16, 0.03, 17, n_points=256)
        assert np.array_equal(a.volume.data, b.volume.data)
        assert np.array_equal(a.labels.data, b.labels.data)
        assert np.array_equal(a.gt_points.data, b.gt_points.data)
        assert np.array_equal(a.gt_normals.data, b.gt_normals.data)
        assert a.seed == b.seed

    def test_different_seeds_differ(self):
        spec = sy.ShapeSpec(kind="ellipsoid", radii=(0.5, 0.4, 0.35))
        a = sy.generate(spec, 16, 0.03, 0, n_points=128)
        b = sy.generate(spec, 16, 0.03, 1, n_points=128)
        assert not np.array_equal(a.volume.data, b.volume.data)

    def test_labels_match_membership_oracle(self):
        rng = np.random.default_rng(23)
        spec = sy.ShapeSpec(
            kind="ellipsoid",
            radii=tuple(rng.uniform(0.3, 0.6, size=3).tolist()),
            rotation=sy.random_rotation(rng),
            center=(0.05, -0.04, 0.08),
        )
        sample = sy.generate(spec, 24, 0.0, 0, n_points=64)
        centers = sy.voxel_centers(24, 24, 24).reshape(-1, 3)
        local = sy._to_local(spec, centers)
        inside = (((local / np.asarray(spec.radii)) ** 2).sum(axis=1) <= 1.0)
        assert np.array_equal(sample.labels.data.reshape(-1) == 1.0, inside)

    def test_shapes_of_fields(self):
        spec = sy.ShapeSpec(kind="ellipsoid", radii=(0.5, 0.4, 0.35))
        sample = sy.generate(spec, 16, 0.02, 5, n_points=200)
        assert sample.volume.shape == (1, 16, 16, 16)
        assert sample.labels.shape == (16, 16, 16)
        assert sample.gt_points.shape == (200, 3)
        assert sample.gt_normals.shape == (200, 3)

    @pytest.mark.parametrize("kind", ["ellipsoid", "blob", "superellipsoid"])
    def test_gt_points_on_surface(self, kind):
        spec = sy.random_shape_spec(np.random.default_rng(7), kind)
        sample = sy.generate(spec, 16, 0.02, 7, n_points=512)
        sd = sy.signed_distance(spec, sample.gt_points.data)
        assert np.abs(sd).max() < 1e-6

    @pytest.mark.parametrize("kind", ["ellipsoid", "blob", "superellipsoid"])
    def test_gt_normals_unit(self, kind):
        spec = sy.random_shape_spec(np.random.default_rng(8), kind)
        sample = sy.generate(spec, 16, 0.02, 8, n_points=512)
        norms = np.sqrt((sample.gt_normals.data**2).sum(axis=1))
        assert np.abs(norms - 1.0).max() < 1e-6

    def test_sphere_normals_point_radially(self):
        spec = sy.ShapeSpec(kind="ellipsoid", radii=(0.5, 0.5, 0.5))
        sample = sy.generate(spec, 16, 0.0, 2, n_points=512)
        pts = sample.gt_points.data
        radial = pts / np.sqrt((pts**2).sum(axis=1, keepdims=True))
        dots = (sample.gt_normals.data * radial).sum(axis=1)
        assert dots.min() > 1.0 - 1e-5

    def test_gt_points_cover_all_octants(self):
        spec = sy.ShapeSpec(kind="ellipsoid", radii=(0.5, 0.5, 0.5))
        sample = sy.generate(spec, 16, 0.0, 4, n_points=2048)
        signs = sample.gt_points.data > 0
        codes = signs[:, 0] * 4 + signs[:, 1] * 2 + signs[:, 2]
        counts = np.bincount(codes.astype(int), minlength=8)
        assert counts.min() > 2048 // 16

    def test_bad_arguments_rejected(self):
        spec = sy.ShapeSpec(kind="ellipsoid", radii=(0.5, 0.4, 0.35))
        with pytest.raises(ValueError):
            sy.generate(spec, 1, 0.02, 0)
        with pytest.raises(ValueError):
            sy.generate(spec, 16, -0.1, 0)
        with pytest.raises(ValueError):
            sy.generate(spec, 16, 0.02, 0, n_points=0)

    def test_voxel_center_frame(self):
        centers = sy.voxel_centers(4, 8, 16)
        assert centers.shape == (4, 8, 16, 3)
        assert np.allclose(centers[0, 0, 0], [-1 + 1 / 16, -1 + 1 / 8, -1 + 1 / 4])
        assert np.allclose(np.diff(centers[0, 0, :, 0]), 2 / 16)
        assert np.allclose(np.diff(centers[0, :, 0, 1]), 2 / 8)
        assert np.allclose(np.diff(centers[:, 0, 0, 2]), 2 / 4)


class TestDataset:
    def test_even_split(self):
        train, test = sy.dataset(6, 0, extent=8, noise_sigma=0.0, n_points=64,
                                 kinds=("ellipsoid",))
        assert len(train) == 3 and len(test) == 3

    def test_thirteen_thirteen(self):
        train, test = sy.dataset(26, 1, extent=4, noise_sigma=0.0, n_points=8,
                                 kinds=("ellipsoid",))
        assert len(train) == 13 and len(test) == 13

    def test_split_deterministic(self):
        a = sy.dataset(4, 5, extent=8, noise_sigma=0.01, n_points=32, kinds=("ellipsoid",))
        b = sy.dataset(4, 5, extent=8, noise_sigma=0.01, n_points=32, kinds=("ellipsoid",))
        for sa, sb in zip(a[0] + a[1], b[0] + b[1]):
            assert sa.seed == sb.seed
            assert np.array_equal(sa.volume.data, sb.volume.data)

    def test_split_disjoint_by_seed(self):
        train, test = sy.dataset(8, 2, extent=8, noise_sigma=0.0, n_points=16,
                                 kinds=("ellipsoid",))
        train_seeds = {s.seed for s in train}
        test_seeds = {s.seed for s in test}
        assert len(train_seeds) == len(train)
        assert not (train_seeds & test_seeds)

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            sy.dataset(1, 0)

    def test_ratio_bounds(self):
        with pytest.raises(ValueError):
            sy.dataset(4, 0, ratio=0.0)
        with pytest.raises(ValueError):
            sy.dataset(4, 0, ratio=1.0)

    def test_point_budget_respected(self):
        train, test = sy.dataset(2, 3, extent=8, noise_sigma=0.0, n_points=37,
                                 kinds=("blob",))
        for s in train + test:
            assert s.gt_points.shape == (37, 3)


class TestVolumeFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.uniform(0.0, 1.0, size=(6, 5, 4)).astype(np.float32)
        path = tmp_path / "vol.vxl"
        sy.save_volume(path, arr)
        back = sy.load_volume(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_magic_prefix(self, tmp_path):
        path = tmp_path / "vol.vxl"
        sy.save_volume(path, np.zeros((2, 2, 2)))
        assert path.read_bytes()[:16] == sy.VXL_MAGIC
        assert len(sy.VXL_MAGIC) == 16

    def test_header_is_json(self, tmp_path):
        import json as js
        import struct as stc

        path = tmp_path / "vol.vxl"
        sy.save_volume(path, np.zeros((3, 4, 5)))
        blob = path.read_bytes()
        (hlen,) = stc.unpack("<I", blob[16:20])
        header = js.loads(blob[20 : 20 + hlen])
        assert header["shape"] == [3, 4, 5]
        assert header["dtype"] == "<f4"
        assert header["order"] == "zyx"

    def test_payload_is_little_endian_rows(self, tmp_path):
        arr = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        path = tmp_path / "vol.vxl"
        sy.save_volume(path, arr)
        blob = path.read_bytes()
        payload = blob[-32:]
        assert np.array_equal(
            np.frombuffer(payload, dtype="<f4"), np.arange(8, dtype=np.float32)
        )

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.vxl"
        path.write_bytes(b"\x00" * 64)
        with pytest.raises(ValueError):
            sy.load_volume(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "vol.vxl"
        sy.save_volume(path, np.zeros((4, 4, 4)))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ValueError):
            sy.load_volume(path)

    def test_non_3d_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            sy.save_volume(tmp_path / "x.vxl", np.zeros((4, 4)))


class TestPointCloudFile:
    def test_round_trip_with_normals(self, tmp_path):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(50, 3))
        nrm = rng.normal(size=(50, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        path = tmp_path / "cloud.obj"
        sy.save_points_obj(path, pts, nrm)
        back_pts, back_nrm = sy.load_points_obj(path)
        assert np.abs(back_pts - pts).max() < 1e-7
        assert np.abs(back_nrm - nrm).max() < 1e-7

    def test_round_trip_points_only(self, tmp_path):
        pts = np.random.default_rng(2).normal(size=(10, 3))
        path = tmp_path / "cloud.obj"
        sy.save_points_obj(path, pts)
        back_pts, back_nrm = sy.load_points_obj(path)
        assert back_nrm is None
        assert back_pts.shape == (10, 3)


class TestManifest:
    def test_round_trip(self, tmp_path):
        manifest = {"count": 4, "split_seed": 7, "train": [0, 2], "test": [1, 3]}
        path = tmp_path / "manifest.json"
        sy.write_manifest(path, manifest)
        assert sy.read_manifest(path) == manifest
