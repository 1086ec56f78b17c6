"""Pixel-grid containers shared across modules: images, depth maps, flow."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass
class Image:
    """An RGB image with float values in [0, 1], shape (H, W, 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DomainError(f"image must have shape (H, W, 3), got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise DomainError("image must have positive dimensions")
        if not np.all(np.isfinite(px)):
            raise DomainError("image values must be finite")
        if px.min() < 0.0 or px.max() > 1.0:
            raise DomainError("image values must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class DepthMap:
    """Per-pixel depth (range along the viewing ray) plus a validity mask.

    Invalid pixels may hold any float; consumers must consult ``valid``.
    Valid entries are finite and positive.
    """

    values: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise DomainError(f"depth map must have shape (H, W), got {vals.shape}")
        if self.valid is None:
            valid = np.isfinite(vals) & (vals > 0)
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != vals.shape:
                raise DomainError("depth validity mask shape mismatch")
        if valid.any():
            v = vals[valid]
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise DomainError("valid depth entries must be finite and > 0")
        self.values = vals
        self.valid = valid

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class FlowField:
    """Forward optical flow (u, v) per reference pixel with validity mask."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise DomainError("flow u/v must be 2D arrays of identical shape")
        if self.valid is None:
            valid = np.isfinite(u) & np.isfinite(v)
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != u.shape:
                raise DomainError("flow validity mask shape mismatch")
        self.u = u
        self.v = v
        self.valid = valid

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def sample(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bilinearly sample the flow at (M, 2) pixel positions.

        Returns (values (M, 2), ok (M,)). A sample is ok when the position is
        inside [0, W-1] x [0, H-1] and every corner contributing nonzero
        weight is valid. At integer positions this reduces to a lookup.
        """
        px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        if px.ndim != 2 or px.shape[1] != 2:
            raise DomainError(f"pixels must have shape (M, 2), got {px.shape}")
        h, w = self.u.shape
        x, y = px[:, 0], px[:, 1]
        inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)

        xc = np.clip(x, 0, w - 1)
        yc = np.clip(y, 0, h - 1)
        x0 = np.minimum(np.floor(xc), w - 2 if w > 1 else 0).astype(np.intp)
        y0 = np.minimum(np.floor(yc), h - 2 if h > 1 else 0).astype(np.intp)
        x1 = np.minimum(x0 + 1, w - 1)
        y1 = np.minimum(y0 + 1, h - 1)
        fx = xc - x0
        fy = yc - y0

        w00 = (1 - fx) * (1 - fy)
        w10 = fx * (1 - fy)
        w01 = (1 - fx) * fy
        w11 = fx * fy

        def gather(a):
            return (w00 * a[y0, x0] + w10 * a[y0, x1]
                    + w01 * a[y1, x0] + w11 * a[y1, x1])

        vals = np.column_stack([gather(self.u), gather(self.v)])

        eps = 1e-12
        ok = inside.copy()
        for wgt, yy, xx in ((w00, y0, x0), (w10, y0, x1),
                            (w01, y1, x0), (w11, y1, x1)):
            used = wgt > eps
            ok &= ~used | self.valid[yy, xx]
        return vals, ok


def require_same_shape(name_a: str, a, name_b: str, b):
    """Raise DomainError unless two grid containers share (H, W)."""
    sa = (a.height, a.width)
    sb = (b.height, b.width)
    if sa != sb:
        raise DomainError(f"{name_a} has shape {sa} but {name_b} has shape {sb}")
