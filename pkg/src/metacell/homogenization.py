"""Effective elastic properties of a unit cell under periodic tiling.

Plane stress, one bilinear quad per pixel, pixel size 1. The three unit
macroscopic strains (e11, e22, g12) are applied through affine displacement
fields; the periodic fluctuation is solved on wrapped degrees of freedom and
the effective stiffness entries come out of energy products. Void pixels keep
a small stiffness fraction so the operator stays definite.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu

from .errors import EmptyMicrostructureError, SolverFailure, ValidationError
from .microstructure import Microstructure

_GAUSS = 1.0 / np.sqrt(3.0)


@dataclass(frozen=True)
class MaterialSpec:
    """Constituent material and the void ersatz fraction."""

    youngs_modulus: float = 1.0
    poisson_ratio: float = 0.49
    void_stiffness_ratio: float = 1e-6

    def __post_init__(self):
        if not 0 < self.void_stiffness_ratio < 1:
            raise ValidationError("void_stiffness_ratio must lie in (0, 1)")
        if not -1 < self.poisson_ratio < 0.5:
            raise ValidationError("poisson_ratio must lie in (-1, 0.5)")
        if self.youngs_modulus <= 0:
            raise ValidationError("youngs_modulus must be positive")

    def constituent(self) -> "StiffnessComponents":
        e, nu = self.youngs_modulus, self.poisson_ratio
        c11 = e / (1.0 - nu * nu)
        return StiffnessComponents(c11, nu * c11, c11, e / (2.0 * (1.0 + nu)))


@dataclass(frozen=True)
class StiffnessComponents:
    """The four independent entries of an orthotropic plane-stress tensor."""

    c11: float
    c12: float
    c22: float
    c33: float

    def as_array(self) -> np.ndarray:
        return np.array([self.c11, self.c12, self.c22, self.c33], dtype=float)

    @classmethod
    def from_array(cls, a) -> "StiffnessComponents":
        a = np.asarray(a, dtype=float).reshape(4)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.c11, self.c12, 0.0],
                [self.c12, self.c22, 0.0],
                [0.0, 0.0, self.c33],
            ]
        )


@dataclass(frozen=True)
class PropertyStandardizer:
    """Componentwise affine map to zero mean, unit spread."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, props: np.ndarray) -> "PropertyStandardizer":
        props = np.asarray(props, dtype=float)
        if props.ndim != 2 or props.shape[1] != 4:
            raise ValidationError(f"expected (n, 4) property matrix, got {props.shape}")
        mean = props.mean(axis=0)
        std = props.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)  # degenerate component: pass through
        return cls(mean=mean, std=std)

    @classmethod
    def identity(cls) -> "PropertyStandardizer":
        return cls(mean=np.zeros(4), std=np.ones(4))

    def transform(self, arr) -> np.ndarray:
        return (np.asarray(arr, dtype=float) - self.mean) / self.std

    def inverse(self, arr) -> np.ndarray:
        return np.asarray(arr, dtype=float) * self.std + self.mean


@dataclass(frozen=True)
class BoundaryStressTraces:
    """Per-face traction magnitudes on the four edges, one row per load case.

    left/right have shape (3, H) ordered top to bottom; top/bottom have
    shape (3, W) ordered left to right.
    """

    left: np.ndarray
    right: np.ndarray
    top: np.ndarray
    bottom: np.ndarray

    def side(self, name: str) -> np.ndarray:
        try:
            return getattr(self, name)
        except AttributeError:
            raise ValidationError(f"unknown side {name!r}") from None


def _shape_gradients(xi: float, eta: float) -> tuple[np.ndarray, np.ndarray]:
    # derivatives w.r.t. physical x, y for a unit-square element (J = I/2)
    dn_dxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
    dn_deta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
    return 2.0 * dn_dxi, 2.0 * dn_deta


def strain_matrix(xi: float, eta: float) -> np.ndarray:
    """3x8 strain-displacement matrix at a natural coordinate point."""
    dn_dx, dn_dy = _shape_gradients(xi, eta)
    b = np.zeros((3, 8))
    b[0, 0::2] = dn_dx
    b[1, 1::2] = dn_dy
    b[2, 0::2] = dn_dy
    b[2, 1::2] = dn_dx
    return b


@lru_cache(maxsize=1)
def element_component_matrices() -> np.ndarray:
    """(4, 8, 8) stack K11, K12, K22, K33 for a unit pixel element.

    The element stiffness for properties (c11, c12, c22, c33) is the dot
    product of the property vector with this stack; 2x2 Gauss quadrature is
    exact for the bilinear integrands.
    """
    basis = np.zeros((4, 3, 3))
    basis[0, 0, 0] = 1.0
    basis[1, 0, 1] = basis[1, 1, 0] = 1.0
    basis[2, 1, 1] = 1.0
    basis[3, 2, 2] = 1.0
    out = np.zeros((4, 8, 8))
    for xi in (-_GAUSS, _GAUSS):
        for eta in (-_GAUSS, _GAUSS):
            b = strain_matrix(xi, eta)
            for k in range(4):
                out[k] += 0.25 * b.T @ basis[k] @ b  # detJ = 1/4, weight 1
    return out


def element_stiffness(props: StiffnessComponents) -> np.ndarray:
    return np.einsum("k,kij->ij", props.as_array(), element_component_matrices())


@lru_cache(maxsize=8)
def _unit_strain_fields(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Wrapped element dof table and affine corner displacements.

    Returns (edof (n_e, 8) int, u0 (3, n_e, 8)) with elements in row-major
    order, corner order SW-of-bitmap style: (r,c), (r,c+1), (r+1,c+1),
    (r+1,c), x along columns and y along rows. Cached per shape; treat the
    returned arrays as read-only.
    """
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    r = rr.ravel()
    c = cc.ravel()

    def nid(ri, ci):
        return (ri % h) * w + (ci % w)

    nodes = np.stack([nid(r, c), nid(r, c + 1), nid(r + 1, c + 1), nid(r + 1, c)], axis=1)
    edof = np.empty((h * w, 8), dtype=np.int64)
    edof[:, 0::2] = 2 * nodes
    edof[:, 1::2] = 2 * nodes + 1

    xs = np.stack([c, c + 1, c + 1, c], axis=1).astype(float)
    ys = np.stack([r, r, r + 1, r + 1], axis=1).astype(float)
    u0 = np.zeros((3, h * w, 8))
    u0[0, :, 0::2] = xs
    u0[1, :, 1::2] = ys
    u0[2, :, 0::2] = 0.5 * ys
    u0[2, :, 1::2] = 0.5 * xs
    return edof, u0


@lru_cache(maxsize=8)
def _assembly_pattern(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    edof, _ = _unit_strain_fields(h, w)
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    return rows, cols


def _periodic_fluctuations(cells: np.ndarray, mat: MaterialSpec):
    """Solve the three periodic cell problems.

    Returns (edof, scale, u0, ustar, k_solid) with ustar of shape
    (3, 2*h*w): the fluctuation displacement per load case on wrapped
    nodes, with the first node pinned to kill rigid translations.
    """
    h, w = cells.shape
    if cells.sum() == 0:
        raise EmptyMicrostructureError("cannot homogenize an all-void cell")
    edof, u0 = _unit_strain_fields(h, w)
    scale = np.where(cells.ravel() > 0, 1.0, mat.void_stiffness_ratio)
    k_solid = element_stiffness(mat.constituent())

    ndof = 2 * h * w
    rows, cols = _assembly_pattern(h, w)
    data = (scale[:, None, None] * k_solid[None, :, :]).ravel()
    kmat = coo_matrix((data, (rows, cols)), shape=(ndof, ndof)).tocsc()

    rhs = np.empty((ndof, 3))
    for case in range(3):
        fe = scale[:, None] * (u0[case] @ k_solid)
        rhs[:, case] = np.bincount(edof.ravel(), weights=-fe.ravel(), minlength=ndof)

    keep = np.arange(2, ndof)  # pin node 0 in x and y
    try:
        # symmetric-pattern ordering roughly halves the factorization time
        lu = splu(kmat[keep][:, keep].tocsc(), permc_spec="MMD_AT_PLUS_A")
        sol = lu.solve(rhs[keep])
    except RuntimeError as exc:  # pragma: no cover - singular only if ersatz = 0
        raise SolverFailure(f"periodic cell solve failed: {exc}") from exc
    if not np.isfinite(sol).all():
        raise SolverFailure("periodic cell solve produced non-finite values")
    ustar = np.zeros((3, ndof))
    ustar[:, 2:] = sol.T
    return edof, scale, u0, ustar, k_solid


def homogenize_full(m: Microstructure, mat: MaterialSpec = MaterialSpec()) -> np.ndarray:
    """Full 3x3 effective stiffness in Voigt order (11, 22, 12-shear)."""
    edof, scale, u0, ustar, k_solid = _periodic_fluctuations(m.cells, mat)
    area = float(m.cells.size)
    utot = u0 + ustar[:, edof]  # (3, n_e, 8)
    v = np.einsum("kei,ij->kej", utot, k_solid)
    c = np.einsum("kej,lej,e->kl", v, utot, scale) / area
    if not np.isfinite(c).all():
        raise SolverFailure("effective stiffness is non-finite")
    return c


def homogenize(m: Microstructure, mat: MaterialSpec = MaterialSpec()) -> StiffnessComponents:
    c = homogenize_full(m, mat)
    return StiffnessComponents(c[0, 0], c[0, 1], c[1, 1], c[2, 2])


_FACE_POINTS = {"left": (-1.0, 0.0), "right": (1.0, 0.0), "top": (0.0, -1.0), "bottom": (0.0, 1.0)}


def boundary_stress_traces(
    m: Microstructure, mat: MaterialSpec = MaterialSpec()
) -> BoundaryStressTraces:
    """Traction magnitudes at the mid-points of the outer boundary faces.

    The stress on each face is averaged with the wrapped neighbor element
    across the periodic seam, so opposite sides report identical traces.
    """
    h, w = m.shape
    edof, scale, u0, ustar, k_solid = _periodic_fluctuations(m.cells, mat)
    cmat = mat.constituent().as_matrix()
    eps0 = np.eye(3)

    def face_stress(elems: np.ndarray, side: str) -> np.ndarray:
        """(3, n, 3) stress tensor rows (s11, s22, s12) per case and face."""
        b = strain_matrix(*_FACE_POINTS[side])
        ue = ustar[:, edof[elems]]  # (3, n, 8)
        strain = eps0[:, None, :] + np.einsum("ij,knj->kni", b, ue)
        return np.einsum("ij,knj,n->kni", cmat, strain, scale[elems])

    def seam(inner: np.ndarray, outer: np.ndarray, inner_side: str, outer_side: str, normal):
        sig = 0.5 * (face_stress(inner, inner_side) + face_stress(outer, outer_side))
        nx, ny = normal
        tx = sig[:, :, 0] * nx + sig[:, :, 2] * ny
        ty = sig[:, :, 2] * nx + sig[:, :, 1] * ny
        return np.hypot(tx, ty)

    rows = np.arange(h)
    cols = np.arange(w)
    left_elems = rows * w
    right_elems = rows * w + (w - 1)
    top_elems = cols
    bottom_elems = (h - 1) * w + cols
    return BoundaryStressTraces(
        left=seam(left_elems, right_elems, "left", "right", (-1.0, 0.0)),
        right=seam(right_elems, left_elems, "right", "left", (1.0, 0.0)),
        top=seam(top_elems, bottom_elems, "top", "bottom", (0.0, -1.0)),
        bottom=seam(bottom_elems, top_elems, "bottom", "top", (0.0, 1.0)),
    )
