"""The triplane latent: three axis-aligned 2D feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PLANE_NAMES = ("xy", "xz", "yz")


@dataclass
class TriplaneLatent:
    """Feature maps over the xy, xz, and yz projections of the volume.

    Extents must agree pairwise: xy and xz share the x extent, xy and yz
    share y, xz and yz share z.
    """

    xy: np.ndarray   # [C, H', W']
    xz: np.ndarray   # [C, H', D']
    yz: np.ndarray   # [C, W', D']

    def __post_init__(self):
        self.xy = np.asarray(self.xy)
        self.xz = np.asarray(self.xz)
        self.yz = np.asarray(self.yz)
        c = self.xy.shape[0]
        if self.xz.shape[0] != c or self.yz.shape[0] != c:
            raise ValueError("channel counts differ across planes")
        h, w = self.xy.shape[1:]
        h2, d = self.xz.shape[1:]
        w2, d2 = self.yz.shape[1:]
        if h != h2 or w != w2 or d != d2:
            raise ValueError(
                f"inconsistent plane extents: xy {self.xy.shape}, "
                f"xz {self.xz.shape}, yz {self.yz.shape}")

    @property
    def channels(self) -> int:
        return self.xy.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        """Latent cells along x, y, z."""
        return (self.xy.shape[1], self.xy.shape[2], self.xz.shape[2])

    @property
    def planes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.xy, self.xz, self.yz)

    def map(self, fn) -> "TriplaneLatent":
        return TriplaneLatent(fn(self.xy), fn(self.xz), fn(self.yz))

    def astype(self, dtype) -> "TriplaneLatent":
        return self.map(lambda p: p.astype(dtype))

    def copy(self) -> "TriplaneLatent":
        return self.map(np.copy)


def plane_dims_for(dims: tuple[int, int, int]) -> tuple[tuple[int, int], ...]:
    """Plane shapes (spatial only) for latent cell counts along x, y, z."""
    x, y, z = dims
    return ((x, y), (x, z), (y, z))


def zeros_like_dims(channels: int, dims: tuple[int, int, int], dtype=np.float64) -> TriplaneLatent:
    (a, b), (c, d), (e, f) = plane_dims_for(dims)
    return TriplaneLatent(np.zeros((channels, a, b), dtype),
                          np.zeros((channels, c, d), dtype),
                          np.zeros((channels, e, f), dtype))
