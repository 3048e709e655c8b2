import dataclasses
import math

import numpy as np
import pytest

from nlosvox import (
    ConfigConflictError,
    ReconstructionConfig,
    ValidationError,
    auto_bounds,
    build_sphere_atlas,
    ellipsoid_from_measurement,
    grid_compare,
    grid_new,
    rectangle_samples,
    reconstruct,
    reconstruct_fast,
    reconstruct_pipeline,
    reconstruct_traditional,
    read_scene,
    simulate_dataset,
    splat_ellipsoid,
)

BOX = ((-0.6, -0.6, 0.2), (0.6, 0.6, 1.4))


def cfg(**kw):
    kw.setdefault("bounds", BOX)
    return ReconstructionConfig(**kw)


@pytest.fixture(scope="module")
def small(two_patch):
    """Two-patch data on every 7th pixel: quick to reconstruct."""
    return two_patch.select_pixels(np.arange(0, 256, 7))


def brute_force_traditional(ds, grid, g_correction):
    """Direct per-voxel evaluation of the back-projection sum."""
    out = np.zeros(grid.resolution)
    c = ds.axis.c
    for ijk in np.ndindex(*grid.resolution):
        x = grid.lo + (np.array(ijk) + 0.5) * grid.voxel_size
        total = 0.0
        for s, l in enumerate(ds.lasers.positions):
            for p, w in enumerate(ds.wall.positions):
                dl, dp = math.dist(l, x), math.dist(x, w)
                t = ds.lasers.laser_offsets[s] + dl / c + dp / c + ds.wall.camera_offsets[p]
                k = math.floor((t - ds.axis.t0) / ds.axis.dt + 0.5)
                if 0 <= k < ds.axis.bins:
                    v = ds.intensity[s, p, k]
                    total += v * (dl * dl * dp * dp) if g_correction else v
        out[ijk] = total
    return out


class TestConfig:
    def test_defaults(self):
        c = ReconstructionConfig()
        assert (c.method, c.mode, c.dedup, c.g_correction, c.max_tess_level) == ("fast", "float", True, False, 5)
        assert c.resolved_epsilon(0.02) == 0.02

    @pytest.mark.parametrize(
        "kw, err",
        [
            (dict(linear_resolution=0), ValidationError),
            (dict(intensity_threshold=1.0), ValidationError),
            (dict(method="magic"), ValidationError),
            (dict(mode="int", g_correction=True, method="traditional"), ConfigConflictError),
            (dict(g_correction=True), ConfigConflictError),
            (dict(threads=0), ValidationError),
        ],
    )
    def test_validation(self, kw, err):
        with pytest.raises(err):
            ReconstructionConfig(**kw).validate()

    def test_method_mismatch(self, small):
        with pytest.raises(ConfigConflictError):
            reconstruct_fast(small, cfg(method="traditional"))
        with pytest.raises(ConfigConflictError):
            reconstruct_traditional(small, cfg(method="fast"))


class TestTraditional:
    @pytest.mark.parametrize("g_correction", [False, True])
    def test_matches_direct_sum(self, small, g_correction):
        ds = small.select_pixels(np.arange(0, small.shape[1], 4))
        grid, stats = reconstruct(ds, cfg(linear_resolution=5, method="traditional", g_correction=g_correction))
        want = brute_force_traditional(ds, grid, g_correction)
        np.testing.assert_allclose(grid.values, want, rtol=1e-12, atol=0)
        assert stats.method == "traditional" and stats.resolution == (5, 5, 5)

    def test_zero_dataset(self, small):
        grid, _ = reconstruct(small.with_intensity(np.zeros(small.shape)), cfg(linear_resolution=12, method="traditional"))
        assert not grid.values.any()

    def test_linear_in_data(self, small):
        a, _ = reconstruct(small, cfg(linear_resolution=16, method="traditional"))
        b, _ = reconstruct(small.with_intensity(small.intensity * 2), cfg(linear_resolution=16, method="traditional"))
        np.testing.assert_array_equal(b.values, a.values * 2)

    def test_dropping_pixels_never_increases(self, small):
        full, _ = reconstruct(small, cfg(linear_resolution=16, method="traditional"))
        keep = np.arange(small.shape[1]) % 3 != 0
        part, _ = reconstruct(small.select_pixels(keep), cfg(linear_resolution=16, method="traditional"))
        assert np.all(part.values <= full.values)

    def test_integer_mode_uses_quantized_weights(self, small):
        grid, _ = reconstruct(small, cfg(linear_resolution=12, method="traditional", mode="int"))
        assert grid.values.dtype == np.uint32 and grid.values.max() > 0

    def test_single_point(self, point_scene):
        ds = simulate_dataset(point_scene)
        grid, _ = reconstruct(ds, cfg(linear_resolution=64, method="traditional"))
        peak = np.unravel_index(np.argmax(grid.values), grid.resolution)
        assert tuple(int(i) for i in peak) == grid.index_of(point_scene.hidden.positions[0])


class TestFast:
    def test_zero_dataset(self, small):
        grid, stats = reconstruct(small.with_intensity(np.zeros(small.shape)), cfg(linear_resolution=12))
        assert not grid.values.any()
        assert stats.ellipsoids_skipped_zero == np.prod(small.shape)
        assert stats.ellipsoids_emitted == 0

    def test_one_bin_is_one_splat(self, small):
        data = np.zeros(small.shape)
        s, p, k = 2, 5, 120
        data[s, p, k] = 0.25
        ds = small.with_intensity(data)
        grid, stats = reconstruct(ds, cfg(linear_resolution=32))
        assert stats.ellipsoids_emitted == 1

        d = ds.axis.c * ((ds.axis.t0 + k * ds.axis.dt - ds.lasers.laser_offsets[s]) - ds.wall.camera_offsets[p])
        spheroid = ellipsoid_from_measurement(ds.lasers.positions[s], ds.wall.positions[p], d)
        ref = grid_new(BOX, 32)
        splat_ellipsoid(ref, spheroid, 0.25, build_sphere_atlas(5), ref.voxel_size)
        np.testing.assert_array_equal(grid.values, ref.values)

    def test_point_agrees_with_traditional(self, point_scene):
        ds = simulate_dataset(point_scene)
        fast, _ = reconstruct(ds, cfg(linear_resolution=64))
        trad, _ = reconstruct(ds, cfg(linear_resolution=64, method="traditional"))
        assert grid_compare(fast, trad).peak_offset <= 1

    def test_accounting(self, small):
        _, stats = reconstruct(small, cfg(linear_resolution=16))
        total = stats.ellipsoids_emitted + stats.ellipsoids_skipped_zero + stats.ellipsoids_degenerate
        assert total == np.prod(small.shape)
        assert stats.triangles_total > 0 and stats.voxel_touches > 0
        assert sum(stats.level_counts.values()) == stats.ellipsoids_emitted

    def test_threshold_skips_faint_samples(self, small):
        _, everything = reconstruct(small, cfg(linear_resolution=12))
        _, bright = reconstruct(small, cfg(linear_resolution=12, intensity_threshold=0.2))
        assert bright.ellipsoids_emitted < everything.ellipsoids_emitted
        assert bright.ellipsoids_skipped_zero > everything.ellipsoids_skipped_zero

    def test_integer_shot_order(self, small):
        a, _ = reconstruct(small, cfg(linear_resolution=24, mode="int"))
        order = np.random.default_rng(2).permutation(small.shape[0])
        b, _ = reconstruct(small.permute_shots(order), cfg(linear_resolution=24, mode="int", threads=2))
        np.testing.assert_array_equal(a.values, b.values)

    def test_python_backend_matches(self, small):
        a, _ = reconstruct(small, cfg(linear_resolution=16))
        b, stats = reconstruct(small, cfg(linear_resolution=16, backend="python"))
        assert stats.backend == "python"
        np.testing.assert_array_equal(a.values, b.values)

    def test_absolute_epsilon(self, small):
        _, coarse = reconstruct(small, cfg(linear_resolution=16, epsilon=0.5))
        _, fine = reconstruct(small, cfg(linear_resolution=16, epsilon=1e-4, max_tess_level=3))
        assert coarse.triangles_total < fine.triangles_total
        assert fine.saturated_levels > 0


class TestPipeline:
    def test_unfiltered_is_normalized_output(self, small):
        raw, _ = reconstruct(small, cfg(linear_resolution=16))
        out = reconstruct_pipeline(small, cfg(linear_resolution=16))
        np.testing.assert_array_equal(out.values, raw.values / raw.values.max())

    def test_zero_stays_zero(self, small):
        out = reconstruct_pipeline(small.with_intensity(np.zeros(small.shape)), cfg(linear_resolution=8), filter=True)
        assert not out.values.any()

    @pytest.mark.parametrize("method", ["traditional", "fast"])
    def test_filtered_patch_recovered(self, scene_path, method):
        patch = rectangle_samples((-0.15, -0.15, 0.7), (0.3, 0, 0), (0, 0.3, 0), counts=(12, 12), flip=True)
        scene = dataclasses.replace(read_scene(scene_path("two_patch")), hidden=patch)
        out = reconstruct_pipeline(simulate_dataset(scene), cfg(linear_resolution=64, method=method), filter=True)
        truth = np.unique(np.floor((patch.positions - out.lo) / out.voxel_size).astype(int), axis=0)
        # best response within one voxel (Chebyshev) of each ground-truth voxel
        padded = np.pad(out.values, 1)
        near = np.zeros(len(truth))
        for offset in np.ndindex(3, 3, 3):
            near = np.maximum(near, padded[tuple((truth + np.array(offset)).T)])
        assert (near >= 0.3).mean() >= 0.9


def test_auto_bounds_in_front_of_wall(two_patch):
    lo, hi = auto_bounds(two_patch)
    reach = np.ptp(two_patch.wall.positions[:, 0])
    assert lo[2] < 0 < hi[2]
    assert hi[2] - lo[2] == pytest.approx(1.1 * reach)
    assert (hi[2] + lo[2]) / 2 == pytest.approx(reach / 2)
    grid, _ = reconstruct(two_patch, ReconstructionConfig(linear_resolution=8))
    np.testing.assert_allclose(grid.hi - grid.lo, 8 * grid.voxel_size)
