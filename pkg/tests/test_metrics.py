import numpy as np
import pytest

from s3dm.geometry import TexturedMesh, normalize_mesh
from s3dm.geometry.procedural import make_box, make_icosphere
from s3dm.metrics import (
    PatchGaussian,
    VoxelOccupancy,
    evaluate_set,
    fit_patch_gaussian,
    frechet_gaussian,
    g_diversity,
    iou,
    patch_frechet,
    tsdf_from_mesh,
    voxelize,
)


@pytest.fixture(scope="module")
def sphere_mesh():
    return normalize_mesh(make_icosphere(3, 0.4))   # radius 0.5


class TestVoxelize:
    def test_sphere_volume_within_ten_percent(self, sphere_mesh):
        occ = voxelize(sphere_mesh, 64)
        cell = (2 * 0.55 / 64) ** 3
        measured = occ.grid.sum() * cell
        analytic = 4.0 / 3.0 * np.pi * 0.5 ** 3
        assert abs(measured - analytic) / analytic <= 0.10

    def test_empty_mesh_gives_zero_grid(self):
        empty = TexturedMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        occ = voxelize(empty, 16)
        assert not occ.grid.any()

    def test_deterministic(self, sphere_mesh):
        a = voxelize(sphere_mesh, 32)
        b = voxelize(sphere_mesh, 32)
        assert np.array_equal(a.grid, b.grid)

    def test_agrees_with_signed_distance_sign(self, sphere_mesh):
        # occupancy at a cell center means the analytic distance is negative
        occ = voxelize(sphere_mesh, 32)
        ax = (np.arange(32) + 0.5) / 32 * 1.1 - 0.55
        centers = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
        analytic_inside = np.linalg.norm(centers, axis=-1) < 0.5
        agreement = (occ.grid == analytic_inside).mean()
        assert agreement >= 0.995   # faceting flips only boundary cells


class TestIoU:
    def test_reflexive(self, sphere_mesh):
        occ = voxelize(sphere_mesh, 32)
        assert iou(occ, occ) == 1.0

    def test_disjoint_is_zero(self):
        a = np.zeros((8, 8, 8), dtype=bool)
        b = np.zeros((8, 8, 8), dtype=bool)
        a[:2] = True
        b[6:] = True
        assert iou(VoxelOccupancy(a, 8), VoxelOccupancy(b, 8)) == 0.0

    def test_both_empty_defined_as_one(self):
        e = VoxelOccupancy(np.zeros((4, 4, 4), dtype=bool), 4)
        assert iou(e, e) == 1.0

    def test_half_overlapping_slabs_third(self):
        # slabs of 2 layers each overlapping in 1: |I|=1 layer, |U|=3 layers
        a = np.zeros((8, 8, 8), dtype=bool)
        b = np.zeros((8, 8, 8), dtype=bool)
        a[0:2] = True
        b[1:3] = True
        assert np.isclose(iou(VoxelOccupancy(a, 8), VoxelOccupancy(b, 8)), 1 / 3)

    def test_symmetry(self, rng):
        a = VoxelOccupancy(rng.random((8, 8, 8)) > 0.5, 8)
        b = VoxelOccupancy(rng.random((8, 8, 8)) > 0.5, 8)
        assert iou(a, b) == iou(b, a)

    def test_resolution_mismatch_rejected(self):
        a = VoxelOccupancy(np.zeros((4, 4, 4), dtype=bool), 4)
        b = VoxelOccupancy(np.zeros((8, 8, 8), dtype=bool), 8)
        with pytest.raises(ValueError, match="resolution"):
            iou(a, b)


class TestDiversity:
    def test_identical_set_is_zero(self, rng):
        occ = VoxelOccupancy(rng.random((8, 8, 8)) > 0.5, 8)
        assert g_diversity([occ, occ, occ]) == 0.0

    def test_two_disjoint_shapes_is_one(self):
        a = np.zeros((8, 8, 8), dtype=bool)
        b = np.zeros((8, 8, 8), dtype=bool)
        a[:3] = True
        b[5:] = True
        assert g_diversity([VoxelOccupancy(a, 8), VoxelOccupancy(b, 8)]) == 1.0

    def test_three_grids_match_counting_oracle(self):
        grids = []
        for occ_range in ((0, 4), (2, 6), (4, 8)):
            g = np.zeros((8, 1, 1), dtype=bool)
            g[occ_range[0]:occ_range[1]] = True
            grids.append(VoxelOccupancy(np.broadcast_to(g, (8, 8, 8)).copy(), 8))
        # hand-counted: iou(0,1)=2/6, iou(0,2)=0/8, iou(1,2)=2/6
        expected = np.mean([1 - 2 / 6, 1 - 0.0, 1 - 2 / 6])
        assert np.isclose(g_diversity(grids), expected, atol=1e-12)

    def test_permutation_invariant(self, rng):
        occs = [VoxelOccupancy(rng.random((6, 6, 6)) > 0.5, 6) for _ in range(4)]
        a = g_diversity(occs)
        b = g_diversity([occs[2], occs[0], occs[3], occs[1]])
        assert np.isclose(a, b, atol=1e-15)

    def test_fewer_than_two_rejected(self, rng):
        occ = VoxelOccupancy(np.zeros((4, 4, 4), dtype=bool), 4)
        with pytest.raises(ValueError, match="at least 2"):
            g_diversity([occ])


class TestPatchFrechet:
    def test_identical_grids_zero(self, rng):
        g = rng.standard_normal((12, 12, 12))
        assert patch_frechet(g, g) <= 1e-8

    def test_matches_scalar_closed_form_for_1d_patches(self, rng):
        # k=1 patches are single cells: the fitted Gaussians are 1D and the
        # distance reduces to (mu_a-mu_b)^2 + (sd_a-sd_b)^2
        a = rng.normal(0.3, 0.05, (10, 10, 10))
        b = rng.normal(-0.1, 0.12, (10, 10, 10))
        got = patch_frechet(a, b, k=1, stride=1)
        mu_a, sd_a = a.mean(), a.std(ddof=1)
        mu_b, sd_b = b.mean(), b.std(ddof=1)
        expected = (mu_a - mu_b) ** 2 + (sd_a - sd_b) ** 2
        assert abs(got - expected) <= 1e-6

    def test_symmetric(self, rng):
        # truncated-distance magnitudes and enough patches for full-rank
        # covariances, the regime the metric runs in
        a = rng.standard_normal((24, 24, 24)) * 0.05
        b = rng.standard_normal((24, 24, 24)) * 0.02
        assert abs(patch_frechet(a, b) - patch_frechet(b, a)) <= 1e-8

    def test_nonnegative_after_floor(self, rng):
        a = rng.standard_normal((8, 8, 8)) * 1e-6
        b = rng.standard_normal((8, 8, 8)) * 1e-6
        assert patch_frechet(a, b) >= 0.0

    def test_grid_smaller_than_patch_rejected(self, rng):
        with pytest.raises(ValueError, match="smaller"):
            fit_patch_gaussian(rng.standard_normal((3, 3, 3)), k=5)

    def test_gaussian_frechet_formula(self):
        a = PatchGaussian(np.array([1.0]), np.array([[4.0]]))
        b = PatchGaussian(np.array([-1.0]), np.array([[9.0]]))
        # (1-(-1))^2 + (2-3)^2 = 5
        assert np.isclose(frechet_gaussian(a, b), 5.0, atol=1e-10)


class TestEvaluateSet:
    def test_duplicate_inputs_give_zero_diversity(self, tmp_path):
        box = normalize_mesh(make_box(half_extents=(0.4, 0.5, 0.3)))
        report = evaluate_set(box, [box, box], resolution=32,
                              report_path=tmp_path / "report.json",
                              iou_csv_path=tmp_path / "iou.csv")
        assert report["g_diversity"] == 0.0
        assert report["mean_patch_frechet_vs_input"] <= 1e-8
        assert report["mean_iou_vs_input"] == 1.0
        assert (tmp_path / "report.json").exists()
        assert (tmp_path / "iou.csv").exists()

    def test_report_fields_finite(self):
        box = normalize_mesh(make_box())
        ball = normalize_mesh(make_icosphere(2, 0.4))
        report = evaluate_set(box, [box, ball], resolution=32)
        for key in ("g_diversity", "mean_iou_vs_input",
                    "mean_patch_frechet_vs_input"):
            assert np.isfinite(report[key])
        assert "proxy" in report["note"]

    def test_single_sample_rejected(self):
        box = normalize_mesh(make_box())
        with pytest.raises(ValueError, match="at least 2"):
            evaluate_set(box, [box], resolution=16)


def test_tsdf_estimator_matches_analytic_sphere(sphere_mesh):
    eps = 3.0 / 64
    tsdf = tsdf_from_mesh(sphere_mesh, 64, eps)
    ax = (np.arange(64) + 0.5) / 64 * 1.1 - 0.55
    centers = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
    analytic = np.clip(np.linalg.norm(centers, axis=-1) - 0.5, -eps, eps)
    # surface sampling and faceting cost well under a cell width
    cell = 1.1 / 64
    assert np.abs(tsdf - analytic).max() <= 1.5 * cell
