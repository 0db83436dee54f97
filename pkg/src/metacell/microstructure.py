"""Binary unit-cell geometry: thresholding, symmetry, repair, perturbation.

A microstructure is an H x W array of {0,1} cells, 1 = solid. Row 0 is the top
of the bitmap, column 0 the left edge. Density fields are float arrays in
[0,1] of the same shape (decoder outputs, intermediate designs).
"""

from __future__ import annotations

import base64
import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError

# Density fields are plain float arrays in [0,1]; no wrapper type.
DensityField = np.ndarray

_4N = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=int)


@dataclass(eq=False)
class Microstructure:
    """Binary cell grid with an optional database id."""

    cells: np.ndarray
    id: int | None = None

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim != 2:
            raise ValidationError(f"cells must be 2-D, got shape {cells.shape}")
        vals = np.unique(cells)
        if not np.isin(vals, (0, 1)).all():
            raise ValidationError("cells must contain only 0 and 1")
        self.cells = cells.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    @property
    def volume_fraction(self) -> float:
        return float(self.cells.mean())

    def packed_bytes(self) -> bytes:
        """Rows bit-packed MSB-first, each row padded to a whole byte."""
        return b"".join(np.packbits(row).tobytes() for row in self.cells)

    def bitmap_hash(self) -> str:
        return hashlib.sha256(self.packed_bytes()).hexdigest()

    def to_base64(self) -> str:
        return base64.b64encode(self.packed_bytes()).decode("ascii")

    @classmethod
    def from_base64(cls, text: str, shape: tuple[int, int], id: int | None = None):
        h, w = shape
        raw = base64.b64decode(text.encode("ascii"), validate=True)
        row_bytes = (w + 7) // 8
        if len(raw) != h * row_bytes:
            raise ValidationError(
                f"packed bitmap has {len(raw)} bytes, expected {h * row_bytes}"
            )
        rows = np.frombuffer(raw, dtype=np.uint8).reshape(h, row_bytes)
        cells = np.unpackbits(rows, axis=1)[:, :w]
        return cls(cells=cells, id=id)


def threshold(density: DensityField, cut: float = 0.9) -> Microstructure:
    """Binarize a density field: solid iff value strictly above the cut."""
    d = np.asarray(density, dtype=float)
    if d.ndim != 2:
        raise ValidationError(f"density must be 2-D, got shape {d.shape}")
    if np.isnan(d).any():
        raise ValidationError("density contains NaN")
    return Microstructure(cells=(d > cut).astype(np.uint8))


def symmetrize(m: Microstructure) -> Microstructure:
    """Impose mirror symmetry about both mid-axes.

    The top-left quadrant is the generator; the other three quadrants are
    its reflections. Requires even dimensions.
    """
    h, w = m.shape
    if h % 2 or w % 2:
        raise ValidationError(f"symmetrize needs even dimensions, got {h}x{w}")
    q = m.cells[: h // 2, : w // 2]
    full = np.block([[q, q[:, ::-1]], [q[::-1, :], q[::-1, ::-1]]])
    return Microstructure(cells=full)


def is_symmetric(m: Microstructure) -> bool:
    c = m.cells
    return bool((c == c[::-1, :]).all() and (c == c[:, ::-1]).all())


def _isolated_mask(cells: np.ndarray) -> np.ndarray:
    """Solid cells with no solid 4-neighbor (grid edges count as void)."""
    n = ndimage.convolve(cells.astype(int), _4N, mode="constant", cval=0)
    return (cells == 1) & (n == 0)


def _checkerboard_fill_mask(cells: np.ndarray) -> np.ndarray:
    """Void cells participating in a 2x2 checkerboard (both diagonals mixed)."""
    c = cells.astype(bool)
    a, b = c[:-1, :-1], c[:-1, 1:]
    d, e = c[1:, :-1], c[1:, 1:]
    # checkerboard = one solid diagonal pair, one void diagonal pair
    cb = (a & e & ~b & ~d) | (b & d & ~a & ~e)
    fill = np.zeros_like(c)
    for off_r, off_c, corner in ((0, 0, a), (0, 1, b), (1, 0, d), (1, 1, e)):
        sel = cb & ~corner
        fill[off_r : off_r + cb.shape[0], off_c : off_c + cb.shape[1]] |= sel
    return fill


def repair(m: Microstructure) -> Microstructure:
    """Remove isolated solid cells and fill 2x2 checkerboard voids.

    Each pass applies all drops at once, then all fills at once on the
    dropped state; masks are computed globally so a symmetric input stays
    symmetric. Drop-before-fill makes a free-floating checkerboard vanish
    instead of flip-flopping, and the pass repeats to a fixed point.
    """
    cells = m.cells.copy()
    for _ in range(cells.size):
        drop = _isolated_mask(cells)
        cells[drop] = 0
        fill = _checkerboard_fill_mask(cells)
        cells[fill] = 1
        if not drop.any() and not fill.any():
            break
    return Microstructure(cells=cells)


def has_defects(m: Microstructure) -> bool:
    return bool(_isolated_mask(m.cells).any() or _checkerboard_fill_mask(m.cells).any())


def boundary_strip(m: Microstructure, side: str) -> np.ndarray:
    """One-cell strip along a boundary edge.

    Left/right strips run top to bottom, top/bottom strips left to right.
    """
    c = m.cells
    if side == "left":
        return c[:, 0].copy()
    if side == "right":
        return c[:, -1].copy()
    if side == "top":
        return c[0, :].copy()
    if side == "bottom":
        return c[-1, :].copy()
    raise ValidationError(f"unknown side {side!r}")


def is_connected(m: Microstructure) -> bool:
    """True if the solid phase is one component touching all four edges."""
    c = m.cells
    if c.sum() == 0:
        return False
    labels, n = ndimage.label(c, structure=_4N)
    if n != 1:
        return False
    return bool(c[0, :].any() and c[-1, :].any() and c[:, 0].any() and c[:, -1].any())


def check_admissible(m: Microstructure) -> list[str]:
    """Reasons a cell is not database-admissible; empty list means ok."""
    problems = []
    if not 0.0 < m.volume_fraction <= 1.0:
        problems.append("volume fraction outside (0, 1]")
    if not is_symmetric(m):
        problems.append("not mirror-symmetric")
    if has_defects(m):
        problems.append("has isolated cells or checkerboards")
    if not is_connected(m):
        problems.append("solid phase not a single edge-to-edge component")
    return problems


@dataclass(frozen=True)
class PerturbParams:
    """Knobs for the random blob perturbation."""

    blob_sizes: tuple[int, ...] = (1, 2, 3)
    max_vf_change: float = 0.05
    max_attempts: int = 50


def _interface_cells(cells: np.ndarray) -> np.ndarray:
    """(n,2) indices of cells with at least one opposite-phase 4-neighbor."""
    n = ndimage.convolve(cells.astype(int), _4N, mode="constant", cval=0)
    solid = cells == 1
    iface = (solid & (n < 4)) | (~solid & (n > 0))
    return np.argwhere(iface)


def perturb(
    m: Microstructure,
    rng: np.random.Generator,
    params: PerturbParams = PerturbParams(),
) -> tuple[Microstructure, bool]:
    """Random square blob add/remove at the phase interface.

    The blob is placed inside the generator quadrant and mirrored out, then
    the result is repaired and validated (volume change cap, symmetry,
    connectivity, no defects). Invalid draws are retried; if max_attempts
    draws all fail the input is returned unchanged with changed=False.
    """
    h, w = m.shape
    if h % 2 or w % 2:
        raise ValidationError("perturb requires even dimensions")
    base = m.cells
    vf0 = base.mean()
    quad = base[: h // 2, : w // 2]
    for _ in range(params.max_attempts):
        iface = _interface_cells(quad)
        if len(iface) == 0:
            break
        r, c = iface[rng.integers(len(iface))]
        size = int(params.blob_sizes[rng.integers(len(params.blob_sizes))])
        solidify = bool(rng.integers(2))
        q = quad.copy()
        r0 = max(0, min(int(r) - size // 2, h // 2 - size))
        c0 = max(0, min(int(c) - size // 2, w // 2 - size))
        q[r0 : r0 + size, c0 : c0 + size] = 1 if solidify else 0
        full = np.block([[q, q[:, ::-1]], [q[::-1, :], q[::-1, ::-1]]])
        cand = repair(Microstructure(cells=full))
        if (cand.cells == base).all():
            continue
        if abs(cand.cells.mean() - vf0) > params.max_vf_change:
            continue
        if check_admissible(cand):
            continue
        return cand, True
    return Microstructure(cells=base.copy(), id=m.id), False
