import numpy as np
import pytest

from s3dm.control import (
    TriplaneMask,
    build_soft_mask,
    duplicate_patch,
    full_mask,
    masked_sample,
    outpaint,
    retarget,
)
from s3dm.diffusion import DenoiserLayout, DenoiserParams, make_schedule, sample_latent, sample_latents
from s3dm.triplane import TriplaneLatent

LAYOUT = DenoiserLayout(1, 0, 1, base_channels=8)
DIMS = (12, 12, 16)
SPACING = 1.0 / 24    # latent cell = 2 * spacing


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(0)
    params = DenoiserParams.init(LAYOUT, 4, rng, "f32")
    schedule = make_schedule(20, 1e-4, 0.012)
    h0 = TriplaneLatent(rng.standard_normal((4, 12, 12)).astype(np.float32),
                        rng.standard_normal((4, 12, 16)).astype(np.float32),
                        rng.standard_normal((4, 12, 16)).astype(np.float32))
    return params, schedule, h0


class TestMask:
    def test_full_volume_box_gives_all_ones(self):
        half = DIMS[0] * SPACING  # spans every cell on each axis
        mask = build_soft_mask(((-1, -1, -1), (1, 1, 1)), DIMS, SPACING, 4.0)
        for m in mask.planes:
            assert np.all(m == 1.0)

    def test_zero_ramp_gives_binary_mask(self):
        box = ((-0.1, -0.1, -0.1), (0.1, 0.1, 0.1))
        mask = build_soft_mask(box, DIMS, SPACING, 0.0)
        for m in mask.planes:
            assert set(np.unique(m)) <= {0.0, 1.0}

    def test_half_volume_box_covers_expected_rows(self):
        # box covering x in [-extent/2, 0]: exactly the lower half of the
        # x cells of the xy and xz planes
        extent_x = DIMS[0] * 2 * SPACING
        box = ((-extent_x / 2, -1, -1), (0, 1, 1))
        mask = build_soft_mask(box, DIMS, SPACING, 0.0)
        expected_rows = np.zeros(DIMS[0])
        expected_rows[: DIMS[0] // 2] = 1.0
        assert np.array_equal(mask.xy.max(axis=1), expected_rows)
        assert np.array_equal(mask.xz.max(axis=1), expected_rows)
        assert np.all(mask.yz == 1.0)

    def test_values_in_unit_interval_with_ramp(self):
        box = ((-0.15, -0.15, -0.15), (0.15, 0.15, 0.15))
        mask = build_soft_mask(box, DIMS, SPACING, 3.0)
        for m in mask.planes:
            assert m.min() >= 0.0 and m.max() <= 1.0
            assert ((m > 0) & (m < 1)).any()   # the ramp exists

    def test_mirrored_box_gives_mirrored_mask(self):
        box = ((-0.2, -0.1, -0.1), (0.05, 0.1, 0.1))
        mirror = ((-0.05, -0.1, -0.1), (0.2, 0.1, 0.1))
        a = build_soft_mask(box, DIMS, SPACING, 2.0)
        b = build_soft_mask(mirror, DIMS, SPACING, 2.0)
        assert np.allclose(a.xy, b.xy[::-1], atol=1e-12)

    def test_empty_box_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_soft_mask(((0.1, 0, 0), (0.1, 1, 1)), DIMS, SPACING)


class TestMaskedSample:
    def test_full_mask_returns_guidance_exactly(self, setup):
        params, schedule, h0 = setup
        mask = full_mask(DIMS)
        out = masked_sample(params, schedule, mask, h0, DIMS, seed=3)[0]
        for o, y in zip(out.planes, h0.planes):
            assert np.array_equal(o, y)

    def test_zero_mask_matches_plain_sampling_bitwise(self, setup):
        params, schedule, h0 = setup
        mask = TriplaneMask(*(np.zeros(m.shape) for m in full_mask(DIMS).planes))
        y0 = h0.map(np.zeros_like)
        ours = masked_sample(params, schedule, mask, y0, DIMS, seed=7)[0]
        plain = sample_latent(params, schedule, DIMS, seed=7)
        for a, b in zip(ours.planes, plain.planes):
            assert np.array_equal(a, b)

    def test_interior_pinned_bitwise(self, setup):
        params, schedule, h0 = setup
        box = ((-0.2, -0.2, -0.2), (0.2, 0.2, 0.2))
        mask = build_soft_mask(box, DIMS, SPACING, 2.0)
        out = masked_sample(params, schedule, mask, h0, DIMS, seed=11)[0]
        for o, y, m in zip(out.planes, h0.planes, mask.planes):
            pinned = m == 1.0
            assert pinned.any()
            assert np.array_equal(o[:, pinned], y.astype(o.dtype)[:, pinned])

    def test_extent_mismatch_rejected(self, setup):
        params, schedule, h0 = setup
        mask = full_mask((14, 14, 16))
        with pytest.raises(ValueError, match="match"):
            masked_sample(params, schedule, mask, h0, DIMS, seed=0)


class TestOutpaint:
    def test_zero_pad_returns_input_latent(self, setup):
        params, schedule, h0 = setup
        outs, mask = outpaint(h0, 0, params, schedule, seed=5)
        for m in mask.planes:
            assert np.all(m == 1.0)
        for o, y in zip(outs[0].planes, h0.planes):
            assert np.array_equal(o, y.astype(o.dtype))

    def test_pad_along_positive_x(self, setup):
        params, schedule, h0 = setup
        outs, mask = outpaint(h0, [0, 16, 0, 0, 0, 0], params, schedule, seed=5)
        out = outs[0]
        assert out.dims == (28, 12, 16)
        # original footprint interior is preserved exactly
        interior = mask.planes[0] == 1.0
        assert np.array_equal(out.xy[:, interior],
                              np.pad(h0.xy, ((0, 0), (0, 16), (0, 0)))[:, interior])

    def test_odd_pad_rounded_up_with_warning(self, setup, caplog):
        params, schedule, h0 = setup
        outs, _ = outpaint(h0, [0, 3, 0, 0, 0, 0], params, schedule, seed=1)
        assert outs[0].dims[0] % 2 == 0

    def test_negative_pad_rejected(self, setup):
        params, schedule, h0 = setup
        with pytest.raises(ValueError, match="non-negative"):
            outpaint(h0, -2, params, schedule, seed=0)


class TestDuplicate:
    def test_dst_equals_src_reproduces_patch(self, setup):
        params, schedule, h0 = setup
        box = ((-0.15, -0.15, -0.15), (0.15, 0.15, 0.15))
        outs, mask = duplicate_patch(h0, box, [box], params, schedule,
                                     seed=2, spacing=SPACING)
        out = outs[0]
        pinned = mask.planes[0] == 1.0
        assert pinned.any()
        assert np.array_equal(out.xy[:, pinned], h0.xy.astype(out.xy.dtype)[:, pinned])

    def test_two_disjoint_destinations_copy_source(self, setup):
        params, schedule, h0 = setup
        extent = np.array(DIMS) * 2 * SPACING
        src = ((-0.5 * extent[0], -0.1, -0.1), (-0.5 * extent[0] + 0.2, 0.1, 0.1))
        d1 = ((0.0, -0.1, -0.1), (0.2, 0.1, 0.1))
        outs, mask = duplicate_patch(h0, src, [d1], params, schedule,
                                     seed=4, spacing=SPACING)
        assert outs[0].dims == DIMS

    def test_overlapping_destinations_rejected(self, setup):
        params, schedule, h0 = setup
        box = ((-0.1, -0.1, -0.1), (0.1, 0.1, 0.1))
        shifted = ((-0.05, -0.1, -0.1), (0.15, 0.1, 0.1))
        with pytest.raises(ValueError, match="overlap"):
            duplicate_patch(h0, box, [box, shifted], params, schedule,
                            seed=0, spacing=SPACING)

    def test_size_mismatch_rejected(self, setup):
        params, schedule, h0 = setup
        src = ((-0.1, -0.1, -0.1), (0.1, 0.1, 0.1))
        big = ((-0.2, -0.2, -0.2), (0.2, 0.2, 0.2))
        with pytest.raises(ValueError, match="size"):
            duplicate_patch(h0, src, [big], params, schedule, seed=0,
                            spacing=SPACING)

    def test_empty_destination_list_is_plain_sampling(self, setup):
        params, schedule, h0 = setup
        src = ((-0.1, -0.1, -0.1), (0.1, 0.1, 0.1))
        outs, _ = duplicate_patch(h0, src, [], params, schedule, seed=9,
                                  spacing=SPACING)
        plain = sample_latent(params, schedule, DIMS, seed=9)
        for a, b in zip(outs[0].planes, plain.planes):
            assert np.array_equal(a, b)


class TestRetarget:
    def test_unit_scale_matches_plain_sampling(self, setup):
        params, schedule, h0 = setup
        ours = retarget(params, schedule, 1.0, DIMS, seed=6)[0]
        plain = sample_latent(params, schedule, DIMS, seed=6)
        for a, b in zip(ours.planes, plain.planes):
            assert np.array_equal(a, b)

    def test_scale_extends_x_planes_only(self, setup):
        params, schedule, h0 = setup
        out = retarget(params, schedule, (1.5, 1, 1), DIMS, seed=6)[0]
        assert out.dims == (18, 12, 16)
        assert out.xy.shape == (4, 18, 12)
        assert out.xz.shape == (4, 18, 16)
        assert out.yz.shape == (4, 12, 16)

    def test_scaled_dims_rounded_even(self, setup):
        params, schedule, h0 = setup
        out = retarget(params, schedule, (1.25, 1, 1), DIMS, seed=0)[0]
        assert out.dims[0] % 2 == 0

    def test_bad_scales_rejected(self, setup):
        params, schedule, h0 = setup
        with pytest.raises(ValueError, match="positive"):
            retarget(params, schedule, (0.0, 1, 1), DIMS, seed=0)
