"""Textured triangle meshes: loading, validation, normalization, export.

File format is Wavefront-style text (v/vt/f records) with a companion
material file pointing at a PNG texture. Positions and UVs are written
with 6 decimal digits.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

FALLBACK_GRAY = 0.5


def _fallback_texture() -> np.ndarray:
    return np.full((4, 4, 3), FALLBACK_GRAY)


@dataclass
class TexturedMesh:
    """Triangle mesh with per-corner UVs and an RGB texture in [0,1]."""

    vertices: np.ndarray                       # [V,3] float
    triangles: np.ndarray                      # [F,3] int
    uvs: np.ndarray = None                     # [F,3,2] float
    texture: np.ndarray = field(default_factory=_fallback_texture)  # [Th,Tw,3]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.uvs is None:
            self.uvs = np.zeros((len(self.triangles), 3, 2))
        self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 3, 2)
        self.texture = np.asarray(self.texture, dtype=np.float64)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if len(self.triangles) and self.triangles.min() < 0:
            raise ValueError("negative triangle index")
        if len(self.uvs) != len(self.triangles):
            raise ValueError("uvs must be per triangle corner")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def corners(self) -> np.ndarray:
        """Triangle corner positions, [F,3,3]."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        c = self.corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return 0.5 * np.linalg.norm(n, axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.num_vertices == 0:
            raise ValueError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def drop_degenerate(self, area_tol: float = 1e-12) -> "TexturedMesh":
        keep = self.areas() > area_tol
        if keep.all():
            return self
        dropped = int((~keep).sum())
        log.warning("dropping %d degenerate triangles", dropped)
        return replace(self, triangles=self.triangles[keep], uvs=self.uvs[keep])


def normalize_mesh(mesh: TexturedMesh) -> TexturedMesh:
    """Center at the bounding-box center and scale the longest side to 1."""
    lo, hi = mesh.bounds()
    extent = hi - lo
    longest = float(extent.max())
    if longest <= 0:
        raise ValueError("degenerate bounding box: zero extent on all axes")
    center = 0.5 * (lo + hi)
    verts = (mesh.vertices - center) / longest
    return replace(mesh, vertices=verts).drop_degenerate()


def sample_texture(texture: np.ndarray, uvs: np.ndarray) -> np.ndarray:
    """Bilinear texture lookup at [N,2] UV coordinates (clamped)."""
    h, w = texture.shape[:2]
    uvs = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
    col = np.clip(uvs[:, 0] * w - 0.5, 0.0, w - 1.0)
    row = np.clip((1.0 - uvs[:, 1]) * h - 0.5, 0.0, h - 1.0)
    c0 = np.minimum(np.floor(col).astype(int), max(w - 2, 0))
    r0 = np.minimum(np.floor(row).astype(int), max(h - 2, 0))
    tc = (col - c0)[:, None]
    tr = (row - r0)[:, None]
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    t = texture
    return ((1 - tr) * ((1 - tc) * t[r0, c0] + tc * t[r0, c1])
            + tr * ((1 - tc) * t[r1, c0] + tc * t[r1, c1]))


# ---------------------------------------------------------------------------
# Wavefront-style I/O


def load_textured_mesh(path: str | os.PathLike) -> TexturedMesh:
    """Parse a v/vt/f mesh file; non-triangle faces are fan-triangulated."""
    path = os.fspath(path)
    positions: list[list[float]] = []
    texcoords: list[list[float]] = []
    face_v: list[list[int]] = []
    face_t: list[list[int]] = []
    mtl_file = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "v":
                    positions.append([float(x) for x in parts[1:4]])
                elif tag == "vt":
                    texcoords.append([float(x) for x in parts[1:3]])
                elif tag == "mtllib":
                    mtl_file = parts[1]
                elif tag == "f":
                    vi, ti = [], []
                    for token in parts[1:]:
                        fields = token.split("/")
                        vi.append(int(fields[0]) - 1)
                        if len(fields) > 1 and fields[1]:
                            ti.append(int(fields[1]) - 1)
                        else:
                            ti.append(-1)
                    if len(vi) < 3:
                        raise ValueError("face with fewer than 3 vertices")
                    for k in range(1, len(vi) - 1):   # fan triangulation
                        face_v.append([vi[0], vi[k], vi[k + 1]])
                        face_t.append([ti[0], ti[k], ti[k + 1]])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: cannot parse {line!r}") from exc
    if not positions or not face_v:
        raise ValueError(f"{path}: no geometry found")

    verts = np.asarray(positions)
    tris = np.asarray(face_v, dtype=np.int64)
    tdx = np.asarray(face_t, dtype=np.int64)

    texture = None
    if mtl_file is not None:
        texture = _load_material_texture(os.path.join(os.path.dirname(path), mtl_file))
    has_uv = len(texcoords) > 0 and (tdx >= 0).all()
    if has_uv:
        uvs = np.asarray(texcoords)[tdx]
    else:
        uvs = np.zeros((len(tris), 3, 2))
    if texture is None or not has_uv:
        log.warning("%s: missing UVs or texture, using uniform gray", path)
        texture = _fallback_texture()
        if not has_uv:
            uvs = np.zeros((len(tris), 3, 2))
    return TexturedMesh(verts, tris, uvs, texture).drop_degenerate()


def _load_material_texture(mtl_path: str) -> np.ndarray | None:
    if not os.path.exists(mtl_path):
        log.warning("material file %s not found", mtl_path)
        return None
    tex_name = None
    with open(mtl_path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts and parts[0] == "map_Kd":
                tex_name = parts[1]
    if tex_name is None:
        return None
    tex_path = os.path.join(os.path.dirname(mtl_path), tex_name)
    if not os.path.exists(tex_path):
        log.warning("texture image %s not found", tex_path)
        return None
    img = Image.open(tex_path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def export_textured_mesh(mesh: TexturedMesh, out_dir: str | os.PathLike,
                         name: str = "mesh") -> dict[str, str]:
    """Write geometry, material, and texture files; returns the paths."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    obj_path = os.path.join(out_dir, f"{name}.obj")
    mtl_path = os.path.join(out_dir, f"{name}.mtl")
    png_path = os.path.join(out_dir, f"{name}.png")

    # Deduplicate texture coordinates to keep files compact.
    flat_uv = mesh.uvs.reshape(-1, 2)
    uv_keys = [f"{u:.6f} {v:.6f}" for u, v in flat_uv]
    uv_index: dict[str, int] = {}
    uv_lines: list[str] = []
    corner_uv = np.empty(len(flat_uv), dtype=np.int64)
    for i, key in enumerate(uv_keys):
        j = uv_index.get(key)
        if j is None:
            j = len(uv_lines)
            uv_index[key] = j
            uv_lines.append(f"vt {key}")
        corner_uv[i] = j

    lines = [f"mtllib {name}.mtl", "usemtl material0"]
    lines.extend(f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices)
    lines.extend(uv_lines)
    cu = corner_uv.reshape(-1, 3)
    lines.extend(
        f"f {t[0] + 1}/{u[0] + 1} {t[1] + 1}/{u[1] + 1} {t[2] + 1}/{u[2] + 1}"
        for t, u in zip(mesh.triangles, cu))
    with open(obj_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    with open(mtl_path, "w", encoding="utf-8") as fh:
        fh.write(f"newmtl material0\nKd 1.0 1.0 1.0\nmap_Kd {name}.png\n")

    img = Image.fromarray(
        np.clip(np.rint(mesh.texture * 255.0), 0, 255).astype(np.uint8))
    img.save(png_path)
    return {"obj": obj_path, "mtl": mtl_path, "png": png_path}
