"""Inference-time control: retargeting, outpainting, patch duplication.

All controls reshape the initial noise or overwrite masked latent regions
during the reverse process; the trained networks are untouched. Masked
regions follow the rule h <- h * (1 - m) + y0 * m after every denoising
step, with exact assignment where m == 1 so overwritten cells carry y0
bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .diffusion import DenoiserParams, DiffusionSchedule, sample_latents
from .triplane import TriplaneLatent, plane_dims_for

log = logging.getLogger(__name__)

_PLANE_AXES = ((0, 1), (0, 2), (1, 2))   # volume axes spanned by xy, xz, yz


@dataclass
class TriplaneMask:
    """Per-plane scalar maps in [0,1]: 1 keeps guidance, 0 synthesizes."""

    xy: np.ndarray
    xz: np.ndarray
    yz: np.ndarray

    @property
    def planes(self):
        return (self.xy, self.xz, self.yz)

    def validate(self):
        for m in self.planes:
            if m.min() < 0.0 or m.max() > 1.0:
                raise ValueError("mask values must lie in [0,1]")
        return self


def _axis_profile(n: int, lo: float, hi: float, ramp: float) -> np.ndarray:
    """1 on [lo,hi] (cell units), linear ramp of `ramp` cells outside."""
    idx = np.arange(n) + 0.5
    if ramp <= 1e-9:
        return ((idx >= lo) & (idx <= hi)).astype(np.float64)
    rising = (idx - (lo - ramp)) / ramp
    falling = ((hi + ramp) - idx) / ramp
    return np.clip(np.minimum(rising, falling), 0.0, 1.0)


def _volume_box_to_cells(box, dims, spacing: float) -> list[tuple[float, float]]:
    """Axis-aligned volume box -> per-axis latent cell intervals."""
    box = np.asarray(box, dtype=np.float64).reshape(2, 3)
    if np.any(box[1] <= box[0]):
        raise ValueError("empty region box")
    cell = 2.0 * spacing    # one latent cell covers two grid cells
    out = []
    for a in range(3):
        origin = -dims[a] * cell / 2.0
        out.append(((box[0, a] - origin) / cell, (box[1, a] - origin) / cell))
    return out


def build_soft_mask(box, plane_dims: tuple[int, int, int], spacing: float,
                    ramp_width: float = 4.0) -> TriplaneMask:
    """Project a 3D box onto the three planes with linear edge ramps."""
    spans = _volume_box_to_cells(box, plane_dims, spacing)
    profiles = [_axis_profile(plane_dims[a], spans[a][0], spans[a][1], ramp_width)
                for a in range(3)]
    planes = []
    for axes in _PLANE_AXES:
        planes.append(np.outer(profiles[axes[0]], profiles[axes[1]]))
    return TriplaneMask(*planes).validate()


def full_mask(plane_dims: tuple[int, int, int]) -> TriplaneMask:
    return TriplaneMask(*(np.ones(s) for s in plane_dims_for(plane_dims)))


def _blend(h: np.ndarray, y: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Soft blend with exact overwrite where the mask is exactly 1."""
    mb = m[None, None]
    out = h * (1.0 - mb) + y[None] * mb
    return np.where(mb == 1.0, np.broadcast_to(y[None], h.shape), out)


def masked_sample(params: DenoiserParams, schedule: DiffusionSchedule,
                  mask: TriplaneMask, y0: TriplaneLatent,
                  plane_dims: tuple[int, int, int], seed: int,
                  count: int = 1) -> list[TriplaneLatent]:
    """Reverse process with the masked region pinned to the guidance y0."""
    expected = plane_dims_for(plane_dims)
    for m, y, shape in zip(mask.planes, y0.planes, expected):
        if m.shape != shape or y.shape[1:] != shape:
            raise ValueError(
                f"mask {m.shape} / guidance {y.shape} do not match planes {shape}")
    dt = params.np_dtype
    masks = [m.astype(dt) for m in mask.planes]
    guides = [y.astype(dt) for y in y0.planes]
    trivial = all((m == 0).all() for m in masks)

    def hook(h_planes, t):
        if trivial:
            return h_planes
        return [_blend(h, y, m) for h, y, m in zip(h_planes, guides, masks)]

    return sample_latents(params, schedule, plane_dims, seed, count, step_hook=hook)


def _pad_spec(pad_cells) -> np.ndarray:
    """Normalize padding to [[x0,x1],[y0,y1],[z0,z1]] latent cells."""
    arr = np.asarray(pad_cells, dtype=np.int64)
    if arr.ndim == 0:
        arr = np.full((3, 2), int(arr))
    elif arr.shape == (3,):
        arr = np.repeat(arr[:, None], 2, axis=1)
    elif arr.shape == (6,):
        arr = arr.reshape(3, 2)
    elif arr.shape != (3, 2):
        raise ValueError(f"bad pad spec shape {arr.shape}")
    if np.any(arr < 0):
        raise ValueError("padding must be non-negative")
    return arr


def outpaint(h0: TriplaneLatent, pad_cells, params: DenoiserParams,
             schedule: DiffusionSchedule, seed: int, ramp_width: float = 4.0,
             count: int = 1) -> tuple[list[TriplaneLatent], TriplaneMask]:
    """Extend the latent beyond its footprint; the original region is pinned.

    pad_cells counts latent cells per side, as a scalar, per-axis triple,
    or per-side sextuple (x0,x1,y0,y1,z0,z1).
    """
    pads = _pad_spec(pad_cells)
    dims = h0.dims
    new_dims = []
    for a in range(3):
        n = dims[a] + pads[a].sum()
        if n % 2:
            pads[a, 1] += 1
            n += 1
            log.warning("padding along axis %d grew by 1 to keep extents even", a)
        new_dims.append(int(n))
    new_dims = tuple(new_dims)

    y_planes = []
    for plane, axes in zip(h0.planes, _PLANE_AXES):
        width = ((0, 0),) + tuple((int(pads[a, 0]), int(pads[a, 1])) for a in axes)
        y_planes.append(np.pad(plane, width))
    y0 = TriplaneLatent(*y_planes)

    profiles = []
    for a in range(3):
        lo, hi = pads[a, 0], pads[a, 0] + dims[a]
        profiles.append(_axis_profile(new_dims[a], lo, hi, ramp_width))
    mask = TriplaneMask(*(np.outer(profiles[a0], profiles[a1])
                          for a0, a1 in _PLANE_AXES)).validate()
    samples = masked_sample(params, schedule, mask, y0, new_dims, seed, count)
    return samples, mask


def duplicate_patch(h0: TriplaneLatent, src_box, dst_boxes, params: DenoiserParams,
                    schedule: DiffusionSchedule, seed: int, spacing: float,
                    ramp_width: float = 4.0, count: int = 1
                    ) -> tuple[list[TriplaneLatent], TriplaneMask]:
    """Copy one latent patch of the input to destination boxes; the rest is
    synthesized around them."""
    dims = h0.dims
    src = _box_cells_int(src_box, dims, spacing)
    size = tuple(hi - lo for lo, hi in src)
    cell = 2.0 * spacing
    src_arr = np.asarray(src_box, dtype=np.float64).reshape(2, 3)
    # snap destinations to the source's cell-range size so copies align
    dsts = []
    for b in dst_boxes:
        arr = np.asarray(b, dtype=np.float64).reshape(2, 3)
        if np.any(np.abs((arr[1] - arr[0]) - (src_arr[1] - src_arr[0])) > cell):
            raise ValueError("destination boxes must match the source box size")
        spans = _volume_box_to_cells(b, dims, spacing)
        d = []
        for a, (lo, _) in enumerate(spans):
            i0 = int(np.clip(np.floor(lo), 0, dims[a] - size[a]))
            d.append((i0, i0 + size[a]))
        dsts.append(d)
    for i, a in enumerate(dsts):
        for b in dsts[i + 1:]:
            if all(a[ax][0] < b[ax][1] and b[ax][0] < a[ax][1] for ax in range(3)):
                raise ValueError("destination boxes overlap")

    y_planes = [np.zeros_like(p) for p in h0.planes]
    mask_planes = [np.zeros(p.shape[1:]) for p in h0.planes]
    if dsts:
        for pi, axes in enumerate(_PLANE_AXES):
            s0, s1 = src[axes[0]], src[axes[1]]
            patch = h0.planes[pi][:, s0[0]:s0[1], s1[0]:s1[1]]
            for d in dsts:
                d0, d1 = d[axes[0]], d[axes[1]]
                y_planes[pi][:, d0[0]:d0[1], d1[0]:d1[1]] = patch
        for d in dsts:
            prof = [_axis_profile(dims[a], d[a][0], d[a][1], ramp_width)
                    for a in range(3)]
            for pi, (a0, a1) in enumerate(_PLANE_AXES):
                mask_planes[pi] = np.maximum(mask_planes[pi],
                                             np.outer(prof[a0], prof[a1]))
    mask = TriplaneMask(*mask_planes).validate()
    y0 = TriplaneLatent(*y_planes)
    samples = masked_sample(params, schedule, mask, y0, dims, seed, count)
    return samples, mask


def _box_cells_int(box, dims, spacing: float) -> list[tuple[int, int]]:
    spans = _volume_box_to_cells(box, dims, spacing)
    out = []
    for a, (lo, hi) in enumerate(spans):
        i0 = int(np.clip(np.floor(lo), 0, dims[a]))
        i1 = int(np.clip(np.ceil(hi), 0, dims[a]))
        if i1 <= i0:
            raise ValueError("region box projects to an empty cell range")
        out.append((i0, i1))
    return out


def retarget(params: DenoiserParams, schedule: DiffusionSchedule,
             scale_factors, base_dims: tuple[int, int, int], seed: int,
             count: int = 1) -> list[TriplaneLatent]:
    """Sample at rescaled latent dimensions (each axis computed once)."""
    scales = np.asarray(scale_factors, dtype=np.float64)
    if scales.ndim == 0:
        scales = np.full(3, float(scales))
    if scales.shape != (3,) or np.any(scales <= 0):
        raise ValueError("scale factors must be three positive numbers")
    dims = []
    for a in range(3):
        n = int(round(base_dims[a] * scales[a]))
        n = max(8, n + (n % 2))
        dims.append(n)
    return sample_latents(params, schedule, tuple(dims), seed, count)
