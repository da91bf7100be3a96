"""Procedural test assets: boxes, icospheres, and a banded column."""

from __future__ import annotations

import numpy as np

from .mesh import TexturedMesh


def make_checker_texture(size: int = 64, tiles: int = 8,
                         color_a=(0.9, 0.2, 0.2), color_b=(0.95, 0.95, 0.9)) -> np.ndarray:
    idx = np.arange(size) * tiles // size
    mask = (idx[:, None] + idx[None, :]) % 2 == 0
    tex = np.where(mask[..., None], np.asarray(color_a), np.asarray(color_b))
    return tex.astype(np.float64)


def make_box(half_extents=(0.5, 0.5, 0.5), center=(0.0, 0.0, 0.0),
             texture: np.ndarray | None = None) -> TexturedMesh:
    """Axis-aligned box, 12 triangles, each face UV-mapped to the full texture."""
    hx, hy, hz = half_extents
    cx, cy, cz = center
    corners = np.array([[sx * hx + cx, sy * hy + cy, sz * hz + cz]
                        for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    # Faces as outward-oriented corner loops (counterclockwise from outside).
    loops = [
        (0, 1, 3, 2),   # -x
        (4, 6, 7, 5),   # +x
        (0, 4, 5, 1),   # -y
        (2, 3, 7, 6),   # +y
        (0, 2, 6, 4),   # -z
        (1, 5, 7, 3),   # +z
    ]
    quad_uv = np.array([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])
    tris, uvs = [], []
    for loop in loops:
        for a, b in ((0, 1), (1, 2)):
            i, j, k = loop[0], loop[1 + a], loop[1 + b]
            tris.append((i, j, k))
            uvs.append((quad_uv[0], quad_uv[1 + a], quad_uv[1 + b]))
    if texture is None:
        texture = make_checker_texture()
    return TexturedMesh(corners, np.array(tris), np.array(uvs), texture)


def make_icosphere(subdivisions: int = 2, radius: float = 0.4) -> TexturedMesh:
    """Icosahedron subdivided and projected onto a sphere. No texture."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ], dtype=np.float64)
    faces = np.array([
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ], dtype=np.int64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}
        vlist = list(verts)

        def midx(i, j):
            key = (min(i, j), max(i, j))
            m = midpoint.get(key)
            if m is None:
                p = vlist[i] + vlist[j]
                p = p / np.linalg.norm(p)
                m = len(vlist)
                vlist.append(p)
                midpoint[key] = m
            return m

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midx(a, b), midx(b, c), midx(c, a)
            new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        verts = np.asarray(vlist)
        faces = np.asarray(new_faces, dtype=np.int64)
    return TexturedMesh(verts * radius, faces)


def _band_palette(v: np.ndarray) -> np.ndarray:
    """Smooth periodic color along the column height, v in [0,1]."""
    r = 0.55 + 0.30 * np.sin(2 * np.pi * 4.0 * v)
    g = 0.50 + 0.22 * np.sin(2 * np.pi * 4.0 * v + 2.1)
    b = 0.45 + 0.18 * np.sin(2 * np.pi * 4.0 * v + 4.2)
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def make_column_texture(size: int = 256) -> np.ndarray:
    v = 1.0 - (np.arange(size) + 0.5) / size   # row 0 is the top of the image
    row_colors = _band_palette(v)
    return np.repeat(row_colors[:, None, :], size, axis=1)


def make_striped_column(bands: int = 8, wide: float = 0.28, narrow: float = 0.21,
                        chamfer: float = 0.02, texture_size: int = 256) -> TexturedMesh:
    """Square column along z with alternating wide/narrow bands.

    Band plateaus are joined by short chamfers so the boundary is a single
    watertight prism. UV v follows height, so the smooth banded texture is
    consistent for any surface point at a given z.
    """
    half_widths = [wide if i % 2 == 0 else narrow for i in range(bands)]
    keys: list[tuple[float, float]] = []   # (z, half width) profile knots
    dz = 1.0 / bands
    for i, w in enumerate(half_widths):
        z0 = -0.5 + i * dz
        z1 = z0 + dz
        lo = z0 + (chamfer if i > 0 else 0.0)
        hi = z1 - (chamfer if i < bands - 1 else 0.0)
        keys.append((z0, w) if i == 0 else (lo, w))
        keys.append((z1, w) if i == bands - 1 else (hi, w))

    square = np.array([(1, 1), (-1, 1), (-1, -1), (1, -1)], dtype=np.float64)
    verts = []
    for z, w in keys:
        for sx, sy in square:
            verts.append((sx * w, sy * w, z))
    verts = np.asarray(verts)

    tris, uvs = [], []

    def vcoord(z):
        return z + 0.5

    # Side quads between consecutive rings, oriented outward.
    for r in range(len(keys) - 1):
        z_lo, z_hi = keys[r][0], keys[r + 1][0]
        for s in range(4):
            a = 4 * r + s
            b = 4 * r + (s + 1) % 4
            c = 4 * (r + 1) + (s + 1) % 4
            d = 4 * (r + 1) + s
            u0, u1 = s / 4.0, (s + 1) / 4.0
            uv_a, uv_b = (u0, vcoord(z_lo)), (u1, vcoord(z_lo))
            uv_c, uv_d = (u1, vcoord(z_hi)), (u0, vcoord(z_hi))
            tris.append((a, b, c)); uvs.append((uv_a, uv_b, uv_c))
            tris.append((a, c, d)); uvs.append((uv_a, uv_c, uv_d))

    # Caps: bottom faces -z, top faces +z.
    nv = len(verts)
    verts = np.vstack([verts, [(0, 0, keys[0][0])], [(0, 0, keys[-1][0])]])
    bot, top = nv, nv + 1
    last = 4 * (len(keys) - 1)
    for s in range(4):
        a, b = s, (s + 1) % 4
        tris.append((bot, b, a))
        uvs.append(((0.5, vcoord(keys[0][0])),) * 3)
        a, b = last + s, last + (s + 1) % 4
        tris.append((top, a, b))
        uvs.append(((0.5, vcoord(keys[-1][0])),) * 3)

    tex = make_column_texture(texture_size)
    return TexturedMesh(verts, np.asarray(tris, dtype=np.int64),
                        np.asarray(uvs, dtype=np.float64), tex)
