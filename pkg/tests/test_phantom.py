import numpy as np
import pytest

from arcplan.errors import AugmentationRejected, ConfigError
from arcplan.geometry import VoxelGrid
from arcplan.phantom import (
    AugmentParams,
    PhantomSpec,
    StructureSet,
    augment,
    dilate_margin,
    generate_phantom,
)


def brute_force_dilate(mask: VoxelGrid, margin: float) -> np.ndarray:
    """O(n * m) oracle: per voxel, min Euclidean distance to any mask voxel center."""
    inside = np.argwhere(mask.values > 0.5).astype(float) * np.asarray(mask.spacing)
    if inside.size == 0:
        return np.zeros(mask.dims, dtype=bool)
    all_idx = np.indices(mask.dims).reshape(3, -1).T.astype(float) * np.asarray(mask.spacing)
    out = np.empty(all_idx.shape[0], dtype=bool)
    for start in range(0, all_idx.shape[0], 4096):
        block = all_idx[start:start + 4096]
        d2 = np.zeros((block.shape[0], inside.shape[0]))
        for a in range(3):
            d2 += (block[:, a:a + 1] - inside[None, :, a]) ** 2
        out[start:start + block.shape[0]] = np.sqrt(d2.min(axis=1)) <= margin
    return out.reshape(mask.dims)


def small_spec(**kw):
    defaults = dict(
        dims=(32, 32, 32),
        spacing=4.0,
        body_semiaxes=(44.0, 40.0, 42.0),
        prostate_radius=10.0,
        bladder_center=(0.0, -22.0, 5.0),
        bladder_radius=11.0,
        rectum_center=(0.0, 18.0, 0.0),
        rectum_radius=6.0,
        rectum_half_length=22.0,
    )
    defaults.update(kw)
    return PhantomSpec(**defaults)


class TestGeneratePhantom:
    def test_same_seed_is_bit_identical(self):
        ct_a, st_a = generate_phantom(PhantomSpec(seed=7))
        ct_b, st_b = generate_phantom(PhantomSpec(seed=7))
        np.testing.assert_array_equal(ct_a.values, ct_b.values)
        for name in st_a.masks:
            np.testing.assert_array_equal(st_a.masks[name].values, st_b.masks[name].values)

    def test_different_seed_changes_ct_noise_only(self):
        ct_a, st_a = generate_phantom(PhantomSpec(seed=1))
        ct_b, st_b = generate_phantom(PhantomSpec(seed=2))
        assert not np.array_equal(ct_a.values, ct_b.values)
        np.testing.assert_array_equal(st_a.masks["PTV"].values, st_b.masks["PTV"].values)

    def test_ptv_nonempty_and_inside_body(self):
        _, st = generate_phantom(PhantomSpec())
        ptv, body = st.mask("PTV"), st.mask("Body")
        assert ptv.sum() > 0
        assert not np.any(ptv & ~body)
        assert not np.any(st.mask("CTV") & ~ptv)

    def test_ptv_matches_brute_force_ctv_expansion(self):
        _, st = generate_phantom(small_spec())
        expected = brute_force_dilate(st.masks["CTV"], 3.0)
        np.testing.assert_array_equal(st.mask("PTV"), expected)

    def test_organs_outside_body_rejected(self):
        with pytest.raises(ConfigError):
            generate_phantom(small_spec(bladder_center=(0.0, -60.0, 0.0), bladder_radius=30.0))

    def test_ct_covers_air_and_tissue(self):
        ct, st = generate_phantom(PhantomSpec())
        assert ct.values.min() == -1000.0
        assert ct.values[st.mask("CTV")].mean() == pytest.approx(45.0)


class TestDilateMargin:
    def test_zero_margin_is_identity(self):
        _, st = generate_phantom(small_spec())
        out = dilate_margin(st.masks["CTV"], 0.0)
        np.testing.assert_array_equal(out.values, st.masks["CTV"].values)

    def test_negative_margin_rejected(self):
        _, st = generate_phantom(small_spec())
        with pytest.raises(ValueError):
            dilate_margin(st.masks["CTV"], -1.0)

    def test_single_voxel_one_spacing_gives_six_connected_ball(self):
        grid = VoxelGrid.centered((9, 9, 9), 4.0)
        vals = grid.values.copy()
        vals[4, 4, 4] = 1.0
        out = dilate_margin(grid.with_values(vals), 4.0)
        expected = np.zeros((9, 9, 9))
        expected[4, 4, 4] = 1.0
        for d in (-1, 1):
            expected[4 + d, 4, 4] = expected[4, 4 + d, 4] = expected[4, 4, 4 + d] = 1.0
        np.testing.assert_array_equal(out.values, expected)

    def test_random_mask_matches_all_pairs_oracle(self):
        rng = np.random.default_rng(13)
        grid = VoxelGrid.centered((32, 32, 32), 4.0)
        vals = (rng.random((32, 32, 32)) < 0.002).astype(np.float64)
        vals[16, 16, 16] = 1.0
        mask = grid.with_values(vals)
        out = dilate_margin(mask, 5.0)
        np.testing.assert_array_equal(out.values > 0.5, brute_force_dilate(mask, 5.0))

    def test_dilation_monotone_in_margin(self):
        _, st = generate_phantom(small_spec())
        a = dilate_margin(st.masks["CTV"], 2.0).values
        b = dilate_margin(st.masks["CTV"], 6.0).values
        assert np.all(a <= b)


def no_op_params(**kw):
    defaults = dict(
        scale_range=(0.0, 0.0),
        rotation_range=(0.0, 0.0),
        ptv_margin_range=(0.0, 0.0),
        rectum_margin_range=(0.0, 0.0),
        per_transform_probability=1.0,
    )
    defaults.update(kw)
    return AugmentParams(**defaults)


class TestAugment:
    def test_zero_probability_is_identity(self):
        ct, st = generate_phantom(small_spec())
        params = AugmentParams(per_transform_probability=0.0)
        ct2, st2 = augment(ct, st, params, seed=3)
        np.testing.assert_array_equal(ct2.values, ct.values)
        for name in st.masks:
            np.testing.assert_array_equal(st2.masks[name].values, st.masks[name].values)

    def test_same_seed_is_deterministic(self):
        ct, st = generate_phantom(small_spec())
        params = AugmentParams(per_transform_probability=0.5)
        a = augment(ct, st, params, seed=11)
        b = augment(ct, st, params, seed=11)
        np.testing.assert_array_equal(a[0].values, b[0].values)
        np.testing.assert_array_equal(a[1].masks["PTV"].values, b[1].masks["PTV"].values)

    def test_pure_scale_grows_body_volume_cubically(self):
        ct, st = generate_phantom(small_spec())
        params = no_op_params(scale_range=(0.20, 0.20))
        _, st2 = augment(ct, st, params, seed=5)
        ratio = st2.masks["Body"].values.sum() / st.masks["Body"].values.sum()
        assert ratio == pytest.approx(1.2**3, rel=0.02)

    def test_ptv_margin_matches_brute_force_dilation(self):
        ct, st = generate_phantom(small_spec())
        params = no_op_params(ptv_margin_range=(3.0, 3.0))
        _, st2 = augment(ct, st, params, seed=9)
        assert np.all(st.masks["PTV"].values <= st2.masks["PTV"].values)
        np.testing.assert_array_equal(
            st2.mask("PTV"), brute_force_dilate(st.masks["PTV"], 3.0)
        )

    def test_rotation_preserves_mask_binarity_and_ct_trilinearity(self):
        ct, st = generate_phantom(small_spec())
        params = no_op_params(rotation_range=(5.0, 5.0))
        ct2, st2 = augment(ct, st, params, seed=2)
        vals = st2.masks["PTV"].values
        assert set(np.unique(vals)) <= {0.0, 1.0}
        assert not np.array_equal(ct2.values, ct.values)

    def test_empty_ptv_rejected_with_reportable_error(self):
        grid = VoxelGrid.centered((16, 16, 16), 4.0)
        corner = grid.values.copy()
        corner[0, 0, 0] = 1.0
        masks = {
            "PTV": grid.with_values(corner),
            "CTV": grid.with_values(corner),
            "Body": grid.with_values(np.ones((16, 16, 16))),
        }
        st = StructureSet(masks=masks)
        params = no_op_params(scale_range=(0.2, 0.2))
        with pytest.raises(AugmentationRejected):
            augment(grid.with_values(np.zeros((16, 16, 16))), st, params, seed=1)
