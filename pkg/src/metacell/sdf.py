"""Signed distance to the boundary of an occupied region of property space.

The region is a dilation of a point cloud on a regular 4-D grid: a node is
occupied if any data point lies within r_occ grid spacings. The two-sided
Euclidean distance transform gives a signed distance (positive inside), and
queries interpolate multilinearly. All coordinates here are already
standardized; callers own the mapping from raw property units.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ValidationError


@dataclass(frozen=True)
class OccupancyField:
    """Grid samples of the signed distance plus node-gradient diagnostics."""

    axes: tuple[np.ndarray, ...]
    values: np.ndarray
    spacing: np.ndarray
    node_gradients: np.ndarray  # central differences of values, axis-major

    @property
    def lower(self) -> np.ndarray:
        return np.array([a[0] for a in self.axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([a[-1] for a in self.axes])

    def _locate(self, pts: np.ndarray):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.shape[1] != len(self.axes):
            raise ValidationError(f"expected {len(self.axes)}-D points, got {pts.shape}")
        lo, hi = self.lower, self.upper
        outside = (pts < lo) | (pts > hi)
        clamped = np.clip(pts, lo, hi)
        idx = np.empty(pts.shape, dtype=np.int64)
        loc = np.empty(pts.shape)
        for a, axis in enumerate(self.axes):
            i = np.clip(np.searchsorted(axis, clamped[:, a], side="right") - 1, 0, len(axis) - 2)
            idx[:, a] = i
            loc[:, a] = (clamped[:, a] - axis[i]) / self.spacing[a]
        return idx, np.clip(loc, 0.0, 1.0), outside.any(axis=1)

    def value_and_gradient(self, pts):
        """Multilinear value and its exact in-cell gradient.

        Returns (phi (n,), grad (n, dim), outside (n,) bool). The gradient is
        the analytic derivative of the interpolant, so central differences of
        value() with any step inside one cell reproduce it to roundoff.
        Outside points are clamped to the box first.
        """
        idx, t, outside = self._locate(pts)
        dim = len(self.axes)
        n = idx.shape[0]
        phi = np.zeros(n)
        grad = np.zeros((n, dim))
        for corner in itertools.product((0, 1), repeat=dim):
            w_ax = np.stack([t[:, a] if corner[a] else 1.0 - t[:, a] for a in range(dim)], axis=1)
            vals = self.values[tuple((idx[:, a] + corner[a]) for a in range(dim))]
            phi += w_ax.prod(axis=1) * vals
            for a in range(dim):
                others = np.prod(np.delete(w_ax, a, axis=1), axis=1)
                sign = 1.0 if corner[a] else -1.0
                grad[:, a] += sign / self.spacing[a] * others * vals
        return phi, grad, outside

    def value(self, pts):
        phi, _, outside = self.value_and_gradient(pts)
        return phi, outside

    def node_gradient(self, pts):
        """Multilinear interpolation of the stored central-difference
        gradients; smoother across cell boundaries than the exact in-cell
        derivative, kept for diagnostics."""
        idx, t, outside = self._locate(pts)
        dim = len(self.axes)
        out = np.zeros((idx.shape[0], dim))
        for corner in itertools.product((0, 1), repeat=dim):
            w = np.prod(
                np.stack([t[:, a] if corner[a] else 1.0 - t[:, a] for a in range(dim)], axis=1),
                axis=1,
            )
            sel = tuple((idx[:, a] + corner[a]) for a in range(dim))
            for a in range(dim):
                out[:, a] += w * self.node_gradients[a][sel]
        return out, outside


def build_occupancy_sdf(
    points: np.ndarray,
    resolution: int = 12,
    margin: float = 0.1,
    r_occ: float = 1.5,
) -> OccupancyField:
    """Signed distance field around a standardized point cloud.

    The grid covers the cloud bounding box plus a margin fraction per side;
    a node counts as occupied when some point lies within r_occ mean grid
    spacings of it.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValidationError(f"expected a nonempty (n, d) point array, got {pts.shape}")
    if resolution < 3:
        raise ValidationError("resolution must be at least 3")
    dim = pts.shape[1]
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    lo = lo - margin * span
    hi = hi + margin * span
    axes = tuple(np.linspace(lo[a], hi[a], resolution) for a in range(dim))
    spacing = (hi - lo) / (resolution - 1)

    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    dist, _ = cKDTree(pts).query(nodes, k=1)
    occ = (dist <= r_occ * spacing.mean()).reshape((resolution,) * dim)

    if occ.all():  # degenerate: cloud saturates the box
        phi = np.full(occ.shape, float(spacing.mean()))
    else:
        inside = ndimage.distance_transform_edt(occ, sampling=spacing)
        outside = ndimage.distance_transform_edt(~occ, sampling=spacing)
        phi = inside - outside
    grads = np.gradient(phi, *axes, edge_order=1)
    if dim == 1:
        grads = [grads]
    return OccupancyField(
        axes=axes, values=phi, spacing=np.asarray(spacing), node_gradients=np.stack(grads)
    )
