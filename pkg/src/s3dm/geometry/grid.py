"""Sampling a mesh into a truncated signed distance + color grid.

Grid convention: cells are cell-centered over the mesh's tight bounding
box expanded by a 2*eps_d margin per side, with uniform spacing
delta = (1 + 4*eps_d) / R so the longest axis gets exactly R cells. Axis
cell counts are rounded up to multiples of 4 (one stride-2 encoder then
one denoiser downsample). The transform is therefore recoverable from
(dims, eps_d) alone, which is all the binary container stores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mesh import TexturedMesh
from .queries import closest_surface_points, nearest_surface_colors, signed_distances, winding_numbers


def _round_up_multiple(n: int, m: int) -> int:
    return ((n + m - 1) // m) * m


@dataclass(frozen=True)
class GridGeometry:
    """Maps between volume coordinates and cell indices."""

    dims: tuple[int, int, int]      # cells along x, y, z
    spacing: float                  # cell width, uniform across axes

    @classmethod
    def for_resolution(cls, extents, resolution: int, eps_d: float) -> "GridGeometry":
        extents = np.asarray(extents, dtype=np.float64)
        if resolution < 8 or resolution % 4:
            raise ValueError("grid resolution must be >= 8 and a multiple of 4")
        spacing = (1.0 + 4.0 * eps_d) / resolution
        dims = []
        for e in extents:
            n = _round_up_multiple(math.ceil((e + 4.0 * eps_d) / spacing - 1e-9), 4)
            dims.append(max(8, min(n, resolution)))
        return cls(tuple(dims), spacing)

    @classmethod
    def from_dims(cls, dims, eps_d: float) -> "GridGeometry":
        dims = tuple(int(d) for d in dims)
        return cls(dims, (1.0 + 4.0 * eps_d) / max(dims))

    @property
    def resolution(self) -> int:
        return max(self.dims)

    def axis_centers(self, axis: int) -> np.ndarray:
        n = self.dims[axis]
        return (np.arange(n) + 0.5 - n / 2.0) * self.spacing

    def cell_centers(self) -> np.ndarray:
        """All cell centers, [H,W,D,3] in volume coordinates."""
        xs, ys, zs = (self.axis_centers(a) for a in range(3))
        grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
        return grid

    @property
    def latent_dims(self) -> tuple[int, int, int]:
        return tuple(d // 2 for d in self.dims)

    def plane_coords(self, points: np.ndarray, latent_dims=None) -> np.ndarray:
        """Normalized [-1,1] coordinates per axis for bilinear plane sampling.

        Anchored to latent cells (2 grid cells each) so enlarged latents
        keep the trained pattern scale.
        """
        ld = latent_dims or self.latent_dims
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        half_span = np.array([ld[a] * self.spacing for a in range(3)])
        return pts / half_span


def volume_pad(extra_latent_cells, spacing: float):
    """Volume-length of latent-cell padding (latent cell = 2 grid cells)."""
    return np.asarray(extra_latent_cells, dtype=np.float64) * 2.0 * spacing


@dataclass
class SdfColorGrid:
    """Dense H x W x D x 4 grid: truncated signed distance plus RGB."""

    values: np.ndarray
    geometry: GridGeometry
    eps_d: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 4 or self.values.shape[3] != 4:
            raise ValueError(f"grid must be [H,W,D,4], got {self.values.shape}")
        if tuple(self.values.shape[:3]) != self.geometry.dims:
            raise ValueError("grid dims do not match geometry")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.geometry.dims

    @property
    def sdf(self) -> np.ndarray:
        return self.values[..., 0]

    @property
    def colors(self) -> np.ndarray:
        return self.values[..., 1:]

    def validate(self):
        d = self.sdf
        if np.abs(d).max() > self.eps_d + 1e-9:
            raise ValueError("signed distance exceeds truncation band")
        band = np.abs(d) < self.eps_d
        c = self.colors
        if c[band].min(initial=0.0) < -1e-9 or c[band].max(initial=0.0) > 1 + 1e-9:
            raise ValueError("colors outside [0,1] inside the band")
        if np.any(c[~band] != 0.0):
            raise ValueError("colors must be zero outside the band")
        return self


@dataclass
class SamplePoints:
    """Query positions with ground-truth distance and color targets."""

    positions: np.ndarray   # [N,3]
    dists: np.ndarray       # [N]
    colors: np.ndarray      # [N,3]

    def __len__(self):
        return len(self.positions)


def _targets_at(mesh: TexturedMesh, points: np.ndarray, eps_d: float):
    d = signed_distances(mesh, points)
    colors = np.zeros((len(points), 3))
    band = np.abs(d) < eps_d
    if band.any():
        colors[band] = nearest_surface_colors(mesh, points[band])
    return np.clip(d, -eps_d, eps_d), colors


def build_grid(mesh: TexturedMesh, resolution: int, eps_d: float) -> SdfColorGrid:
    """Sample truncated signed distance and surface colors at cell centers."""
    if mesh.num_triangles == 0:
        raise ValueError("empty mesh")
    lo, hi = mesh.bounds()
    geom = GridGeometry.for_resolution(hi - lo, resolution, eps_d)
    centers = geom.cell_centers().reshape(-1, 3)
    d, colors = _targets_at(mesh, centers, eps_d)
    values = np.concatenate([d[:, None], colors], axis=1)
    values = values.reshape(geom.dims + (4,))
    return SdfColorGrid(values, geom, eps_d)


def grid_sample_points(grid: SdfColorGrid) -> SamplePoints:
    """Every grid cell center with its stored targets."""
    centers = grid.geometry.cell_centers().reshape(-1, 3)
    vals = grid.values.reshape(-1, 4)
    return SamplePoints(centers, vals[:, 0].astype(np.float64),
                        vals[:, 1:].astype(np.float64))


def sample_near_surface_points(mesh: TexturedMesh, count: int, sigma_offset: float,
                               eps_d: float, rng: np.random.Generator) -> SamplePoints:
    """Area-uniform surface points plus isotropic Gaussian offsets."""
    if count == 0:
        return SamplePoints(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))
    if mesh.num_triangles == 0:
        raise ValueError("empty mesh")
    areas = mesh.areas()
    probs = areas / areas.sum()
    tri_idx = rng.choice(len(areas), size=count, p=probs)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    corners = mesh.corners()[tri_idx]
    surface = np.einsum("nc,nck->nk", bary, corners)
    pts = surface + sigma_offset * rng.standard_normal((count, 3))
    d, colors = _targets_at(mesh, pts, eps_d)
    return SamplePoints(pts, d, colors)


def voxelize_inside(mesh: TexturedMesh, points: np.ndarray) -> np.ndarray:
    """Winding-number inside test for arbitrary points."""
    return winding_numbers(mesh, points) >= 0.5


__all__ = [
    "GridGeometry", "SdfColorGrid", "SamplePoints", "build_grid",
    "grid_sample_points", "sample_near_surface_points", "volume_pad",
    "closest_surface_points", "voxelize_inside",
]
