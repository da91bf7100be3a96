"""Per-triangle UV charts with shelf packing and barycentric baking.

Every triangle gets its own isometric 2D chart, padded by a gutter so
rasterized charts never overlap. Covered texels are colored by mapping the
texel center back to its 3D position and querying a color callback; the
gutter ring is then flooded with nearest chart colors so bilinear texture
filtering does not bleed background into the surface.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .mesh import TexturedMesh


@dataclass
class Atlas:
    texture_size: int
    gutter: int
    texels_per_unit: float
    uvs: np.ndarray            # [F,3,2]
    chart_of_texel: np.ndarray  # [T,T] int32, -1 where uncovered (pre-dilation)
    texel_rows: np.ndarray     # [K] covered texel rows
    texel_cols: np.ndarray     # [K] covered texel cols
    texel_positions: np.ndarray  # [K,3] 3D positions of covered texel centers


def _embed_triangles(mesh: TexturedMesh):
    """Isometric 2D coordinates per triangle, bbox-anchored at the origin."""
    c = mesh.corners()
    e1 = c[:, 1] - c[:, 0]
    e2 = c[:, 2] - c[:, 0]
    len1 = np.linalg.norm(e1, axis=1)
    u_axis = e1 / np.maximum(len1, 1e-300)[:, None]
    proj = np.einsum("fk,fk->f", e2, u_axis)
    v_vec = e2 - proj[:, None] * u_axis
    len_v = np.linalg.norm(v_vec, axis=1)
    p2 = np.zeros((len(c), 3, 2))
    p2[:, 1, 0] = len1
    p2[:, 2, 0] = proj
    p2[:, 2, 1] = len_v
    lo = p2.min(axis=1)
    return p2 - lo[:, None, :]


def _try_pack(sizes: np.ndarray, texture_size: int):
    """Shelf-pack charts sorted by height; returns origins or None."""
    order = np.lexsort((sizes[:, 0], -sizes[:, 1]))
    origins = np.zeros((len(sizes), 2), dtype=np.int64)
    x = y = shelf_h = 0
    for i in order:
        w, h = int(sizes[i, 0]), int(sizes[i, 1])
        if w > texture_size or h > texture_size:
            return None
        if x + w > texture_size:
            y += shelf_h
            x = 0
            shelf_h = 0
        if y + h > texture_size:
            return None
        origins[i] = (x, y)
        x += w
        shelf_h = max(shelf_h, h)
    return origins


def build_atlas(mesh: TexturedMesh, texture_size: int = 2048, gutter: int = 2) -> Atlas:
    """Pack per-triangle charts and precompute covered texels."""
    if mesh.num_triangles == 0:
        raise ValueError("cannot atlas an empty mesh")
    p2 = _embed_triangles(mesh)
    extents = p2.max(axis=1)          # [F,2] chart sizes in world units
    pad = 2 * gutter + 1

    def sizes_at(scale):
        base = np.maximum(np.ceil(extents * scale - 1e-9), 1.0)
        return base.astype(np.int64) + pad

    # Minimum density: every chart keeps at least one texel across, so the
    # floor is the near-zero scale where each chart is a padded unit cell.
    s_min = 1e-9 / max(extents.max(), 1e-12)
    if _try_pack(sizes_at(s_min), texture_size) is None:
        need = np.prod(sizes_at(s_min), axis=1).sum()
        hint = int(np.ceil(np.sqrt(need / 0.6)))
        raise ValueError(
            f"texture size {texture_size} too small to pack {mesh.num_triangles} "
            f"charts at minimum density; try >= {hint}")

    s_lo = s_min
    s_hi = max(s_min * 2, np.sqrt(0.6 * texture_size ** 2 / max(np.prod(
        extents + 1e-9, axis=1).sum(), 1e-12)))
    while _try_pack(sizes_at(s_hi), texture_size) is not None:
        s_lo = s_hi
        s_hi *= 2
    for _ in range(18):
        mid = 0.5 * (s_lo + s_hi)
        if _try_pack(sizes_at(mid), texture_size) is not None:
            s_lo = mid
        else:
            s_hi = mid
    scale = s_lo
    origins = _try_pack(sizes_at(scale), texture_size)
    assert origins is not None

    t = texture_size
    chart_of = np.full((t, t), -1, dtype=np.int32)
    uvs = np.zeros((mesh.num_triangles, 3, 2))
    rows_all, cols_all, pos_all = [], [], []
    corners = mesh.corners()
    for f in range(mesh.num_triangles):
        ox, oy = origins[f]
        tex2 = p2[f] * scale + (ox + gutter + 0.5, oy + gutter + 0.5)
        # sample_texture flips v internally, so v here runs bottom-up like y
        uvs[f, :, 0] = tex2[:, 0] / t
        uvs[f, :, 1] = tex2[:, 1] / t

        x0 = int(np.floor(tex2[:, 0].min()))
        x1 = int(np.ceil(tex2[:, 0].max()))
        y0 = int(np.floor(tex2[:, 1].min()))
        y1 = int(np.ceil(tex2[:, 1].max()))
        px, py = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1),
                             indexing="ij")
        centers = np.stack([px.ravel() + 0.5, py.ravel() + 0.5], axis=1)
        bary = _bary_2d(tex2, centers)
        cover = (bary >= -1e-9).all(axis=1)
        if not cover.any():
            # Tiny chart: claim the texel nearest the centroid so the
            # triangle still gets a color.
            centroid = tex2.mean(axis=0)
            d2 = ((centers - centroid) ** 2).sum(axis=1)
            cover = np.zeros(len(centers), dtype=bool)
            cover[int(np.argmin(d2))] = True
            bary = np.full_like(bary, 1.0 / 3.0)
        cx = px.ravel()[cover]
        cy = py.ravel()[cover]
        if (chart_of[cx, cy] != -1).any():
            raise AssertionError("chart rasterization overlap")
        chart_of[cx, cy] = f
        rows_all.append(cx)
        cols_all.append(cy)
        pos_all.append(bary[cover] @ corners[f])

    return Atlas(texture_size=t, gutter=gutter, texels_per_unit=scale, uvs=uvs,
                 chart_of_texel=chart_of,
                 texel_rows=np.concatenate(rows_all),
                 texel_cols=np.concatenate(cols_all),
                 texel_positions=np.concatenate(pos_all))


def _bary_2d(tri2: np.ndarray, points: np.ndarray) -> np.ndarray:
    a, b, c = tri2
    v0 = b - a
    v1 = c - a
    v2 = points - a
    den = v0[0] * v1[1] - v1[0] * v0[1]
    if den == 0.0:
        return np.full((len(points), 3), -1.0)
    u = (v2[:, 0] * v1[1] - v1[0] * v2[:, 1]) / den
    v = (v0[0] * v2[:, 1] - v2[:, 0] * v0[1]) / den
    return np.stack([1.0 - u - v, u, v], axis=1)


def bake_texture(atlas: Atlas, color_query: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Color covered texels through the callback and dilate into gutters."""
    t = atlas.texture_size
    image = np.zeros((t, t, 3))
    colors = np.asarray(color_query(atlas.texel_positions), dtype=np.float64)
    colors = np.clip(colors, 0.0, 1.0)
    # texel (x=col from left, y=row from bottom) -> image[row from top, col]
    image[t - 1 - atlas.texel_cols, atlas.texel_rows] = colors
    covered = np.zeros((t, t), dtype=bool)
    covered[t - 1 - atlas.texel_cols, atlas.texel_rows] = True
    for _ in range(atlas.gutter):
        grown = covered.copy()
        for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
            src = np.roll(covered, shift, axis=axis)
            if shift > 0:
                src[(slice(0, 1) if axis == 0 else (slice(None), slice(0, 1)))] = False
            else:
                src[(slice(-1, None) if axis == 0 else (slice(None), slice(-1, None)))] = False
            fill = src & ~grown
            if fill.any():
                image[fill] = np.roll(image, shift, axis=axis)[fill]
                grown |= fill
        covered = grown
    return image


def uv_atlas_and_bake(mesh: TexturedMesh, color_query: Callable[[np.ndarray], np.ndarray],
                      texture_size: int = 2048, gutter: int = 2) -> TexturedMesh:
    """Assign per-triangle chart UVs and bake a texture via the color callback."""
    atlas = build_atlas(mesh, texture_size, gutter)
    texture = bake_texture(atlas, color_query)
    return replace(mesh, uvs=atlas.uvs, texture=texture)
