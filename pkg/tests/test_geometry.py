import numpy as np
import pytest

from arcplan.errors import ConfigError
from arcplan.geometry import (
    BevProjector,
    ControlPointGeometry,
    VoxelGrid,
    build_arc_geometry,
    project_stack,
    project_to_bev,
)


def ray_box_length(source, target, lo, hi):
    """Closed-form slab intersection length of the infinite ray source->target."""
    d = np.asarray(target, float) - np.asarray(source, float)
    t_in, t_out = 0.0, np.inf
    for a in range(3):
        if d[a] == 0.0:
            if not (lo[a] < source[a] < hi[a]):
                return 0.0
            continue
        t0 = (lo[a] - source[a]) / d[a]
        t1 = (hi[a] - source[a]) / d[a]
        t_in = max(t_in, min(t0, t1))
        t_out = min(t_out, max(t0, t1))
    return max(0.0, t_out - t_in) * np.linalg.norm(d)


def single_voxel_grid(dims, spacing, hot_index):
    grid = VoxelGrid.centered(dims, spacing)
    values = grid.values.copy()
    values[hot_index] = 1.0
    return grid.with_values(values)


def voxel_bounds(grid, idx):
    c = np.asarray(grid.origin) + np.asarray(idx) * np.asarray(grid.spacing)
    half = np.asarray(grid.spacing) / 2.0
    return c - half, c + half


class TestArcGeometry:
    def test_default_arc_has_180_cps_every_2_degrees(self):
        geoms = build_arc_geometry(n_cp=180, start_angle=0.0)
        assert len(geoms) == 180
        np.testing.assert_allclose([g.gantry_angle for g in geoms], np.arange(0.0, 360.0, 2.0))

    def test_four_cp_arc_hits_cardinal_angles(self):
        geoms = build_arc_geometry(n_cp=4, start_angle=0.0)
        assert [g.gantry_angle for g in geoms] == [0.0, 90.0, 180.0, 270.0]

    def test_default_raster_is_40x40(self):
        geom = build_arc_geometry(n_cp=2)[0]
        assert geom.bev_fov == 200.0 and geom.bev_spacing == 5.0
        assert geom.n_pixels == 40

    def test_non_divisible_fov_rejected(self):
        with pytest.raises(ConfigError):
            build_arc_geometry(n_cp=4, bev_spacing=7.0, bev_fov=200.0)

    def test_too_few_control_points_rejected(self):
        with pytest.raises(ConfigError):
            build_arc_geometry(n_cp=1)

    def test_degenerate_sad_rejected(self):
        with pytest.raises(ConfigError):
            ControlPointGeometry(index=0, gantry_angle=0.0, source_axis_distance=0.0)


class TestBevProjection:
    def test_zero_volume_projects_to_zero_everywhere(self):
        grid = VoxelGrid.centered((9, 9, 9), 4.0)
        for geom in build_arc_geometry(n_cp=6):
            assert np.all(project_to_bev(grid, geom) == 0.0)

    def test_isocenter_voxel_hits_central_pixel_at_every_angle(self):
        # Odd raster so a pixel center sits exactly on the beam axis.
        grid = single_voxel_grid((9, 9, 9), 4.0, (4, 4, 4))
        for geom in build_arc_geometry(n_cp=12, bev_spacing=8.0, bev_fov=200.0):
            img = project_to_bev(grid, geom)
            assert img[12, 12] > 0.0
            assert np.unravel_index(np.argmax(img), img.shape) == (12, 12)

    @pytest.mark.parametrize("gantry", [0.0, 37.0, 90.0])
    def test_matches_closed_form_ray_box_oracle(self, gantry):
        grid = single_voxel_grid((33, 33, 33), 4.0, (26, 16, 16))  # voxel center (40, 0, 0)
        geom = ControlPointGeometry(
            index=0, gantry_angle=gantry, bev_spacing=5.0, bev_fov=195.0
        )
        img = project_to_bev(grid, geom)
        lo, hi = voxel_bounds(grid, (26, 16, 16))
        source = geom.source_position()
        expected = np.array(
            [ray_box_length(source, t, lo, hi) for t in geom.pixel_targets()]
        ).reshape(39, 39)
        np.testing.assert_allclose(img, expected, rtol=1e-9, atol=1e-12)

    def test_lateral_voxel_displaced_along_u_then_centered_at_90deg(self):
        grid = single_voxel_grid((33, 33, 33), 4.0, (26, 16, 16))  # 40 mm lateral (+x)
        geom0 = ControlPointGeometry(index=0, gantry_angle=0.0, bev_spacing=5.0, bev_fov=195.0)
        geom90 = ControlPointGeometry(index=1, gantry_angle=90.0, bev_spacing=5.0, bev_fov=195.0)
        row0, col0 = np.unravel_index(np.argmax(project_to_bev(grid, geom0)), (39, 39))
        # u = 40 mm on the isocenter plane -> column 27 (center at +40 mm), central row.
        assert (row0, col0) == (19, 27)
        row90, col90 = np.unravel_index(np.argmax(project_to_bev(grid, geom90)), (39, 39))
        assert (row90, col90) == (19, 19)

    def test_projection_is_linear(self):
        rng = np.random.default_rng(11)
        base = VoxelGrid.centered((17, 17, 17), 4.0)
        v1 = base.with_values(rng.random((17, 17, 17)))
        v2 = base.with_values(rng.random((17, 17, 17)))
        a, b = 2.5, -0.75
        combo = base.with_values(a * v1.values + b * v2.values)
        geom = ControlPointGeometry(index=0, gantry_angle=53.0)
        lhs = project_to_bev(combo, geom)
        rhs = a * project_to_bev(v1, geom) + b * project_to_bev(v2, geom)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)

    def test_projection_is_deterministic(self):
        rng = np.random.default_rng(3)
        vol = VoxelGrid.centered((17, 17, 17), 4.0).with_values(rng.random((17, 17, 17)))
        geom = ControlPointGeometry(index=0, gantry_angle=121.0)
        first = project_to_bev(vol, geom)
        second = project_to_bev(vol, geom)
        np.testing.assert_array_equal(first, second)

    def test_non_finite_volume_rejected(self):
        vol = VoxelGrid.centered((5, 5, 5), 4.0)
        bad = vol.values.copy()
        bad[2, 2, 2] = np.nan
        geom = ControlPointGeometry(index=0, gantry_angle=0.0)
        with pytest.raises(ValueError):
            project_to_bev(vol.with_values(bad), geom)


class TestProjectStack:
    def test_zero_volume_gives_zero_stack_with_default_shape(self):
        grid = VoxelGrid.centered((9, 9, 9), 8.0)
        stack = project_stack(grid, build_arc_geometry(n_cp=180))
        assert stack.values.shape == (180, 40, 40)
        assert np.all(stack.values == 0.0)

    def test_single_geom_stack_equals_direct_projection(self):
        rng = np.random.default_rng(5)
        vol = VoxelGrid.centered((9, 9, 9), 6.0).with_values(rng.random((9, 9, 9)))
        geom = ControlPointGeometry(index=0, gantry_angle=222.0)
        stack = project_stack(vol, [geom])
        np.testing.assert_array_equal(stack.values[0], project_to_bev(vol, geom))

    def test_permuting_geoms_permutes_slices(self):
        rng = np.random.default_rng(6)
        vol = VoxelGrid.centered((13, 13, 13), 5.0).with_values(rng.random((13, 13, 13)))
        geoms = build_arc_geometry(n_cp=8)
        perm = [3, 0, 7, 5, 1, 6, 2, 4]
        straight = project_stack(vol, geoms)
        shuffled = project_stack(vol, [geoms[i] for i in perm])
        np.testing.assert_array_equal(shuffled.values, straight.values[perm])

    def test_mixed_raster_parameters_rejected(self):
        a = ControlPointGeometry(index=0, gantry_angle=0.0, bev_spacing=5.0)
        b = ControlPointGeometry(index=1, gantry_angle=10.0, bev_spacing=10.0)
        with pytest.raises(ConfigError):
            project_stack(VoxelGrid.centered((5, 5, 5), 4.0), [a, b])

    def test_cached_projector_matches_per_call_projection(self):
        rng = np.random.default_rng(7)
        vol = VoxelGrid.centered((13, 13, 13), 5.0).with_values(rng.random((13, 13, 13)))
        geoms = build_arc_geometry(n_cp=10)
        projector = BevProjector.build(vol, geoms)
        np.testing.assert_allclose(
            projector.project(vol.values).values,
            project_stack(vol, geoms).values,
            rtol=1e-13,
            atol=0.0,
        )
