from .atlas import Atlas, bake_texture, build_atlas, uv_atlas_and_bake
from .grid import (
    GridGeometry,
    SamplePoints,
    SdfColorGrid,
    build_grid,
    grid_sample_points,
    sample_near_surface_points,
    volume_pad,
)
from .marching import marching_cubes
from .mesh import TexturedMesh, export_textured_mesh, load_textured_mesh, normalize_mesh, sample_texture
from .queries import (
    closest_surface_points,
    nearest_surface_color,
    nearest_surface_colors,
    signed_distance,
    signed_distances,
    winding_numbers,
)

__all__ = [
    "Atlas", "bake_texture", "build_atlas", "uv_atlas_and_bake",
    "GridGeometry", "SamplePoints", "SdfColorGrid", "build_grid",
    "grid_sample_points", "sample_near_surface_points", "volume_pad",
    "marching_cubes", "TexturedMesh", "export_textured_mesh",
    "load_textured_mesh", "normalize_mesh", "sample_texture",
    "closest_surface_points", "nearest_surface_color", "nearest_surface_colors",
    "signed_distance", "signed_distances", "winding_numbers",
]
