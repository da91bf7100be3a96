"""Isosurface extraction from a signed distance grid."""

from __future__ import annotations

import numpy as np
from skimage import measure

from .grid import GridGeometry
from .mesh import TexturedMesh


def marching_cubes(sdf: np.ndarray, geometry: GridGeometry | None = None,
                   isolevel: float = 0.0) -> TexturedMesh:
    """Extract the isolevel surface as a geometry-only mesh.

    Vertices sit on cell edges at linear zero crossings; triangles are
    oriented outward (toward positive distance). A field with no sign
    change yields an empty mesh.
    """
    sdf = np.asarray(sdf, dtype=np.float64)
    if sdf.ndim != 3 or min(sdf.shape) < 2:
        raise ValueError("sdf grid must be 3D with at least 2 cells per axis")
    if sdf.min() >= isolevel or sdf.max() <= isolevel:
        return TexturedMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(sdf, level=isolevel)
    if geometry is not None:
        if geometry.dims != sdf.shape:
            raise ValueError("geometry dims do not match sdf grid")
        offset = np.array([0.5 - n / 2.0 for n in geometry.dims])
        verts = (verts + offset) * geometry.spacing
    return TexturedMesh(verts, faces.astype(np.int64))
