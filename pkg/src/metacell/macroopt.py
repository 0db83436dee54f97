"""Macro-scale property design on a quadrilateral effective-medium mesh.

Stage one of the two-scale workflow: the design domain is a regular grid of
unit-square bilinear elements, each carrying its own plane-stress tuple
(c11, c12, c22, c33). A target-displacement objective is minimized with MMA,
either over all four components per element (kept inside the sampled
property region through a signed distance constraint) or along a gradation
curve with one scalar per element.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu

from .errors import FileFormatError, SolverFailure, ValidationError
from .family import GradationCurve
from .homogenization import (
    PropertyStandardizer,
    StiffnessComponents,
    element_component_matrices,
)
from .mma import MmaOptions, mma_step
from .sdf import OccupancyField, build_occupancy_sdf

_AXES = {"x": 0, "y": 1}


@dataclass
class MacroProblem:
    """Design mesh with supports, loads and the displacement target.

    n_cols x n_rows unit-square elements; node (col i, row j) has id
    j*(n_cols+1)+i and two dofs (x then y). dirichlet_dofs may prescribe
    nonzero values. selector is 1 at the dofs whose displacement is
    targeted and 0 elsewhere; target must vanish off the selector.
    """

    n_cols: int
    n_rows: int
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray
    loads: np.ndarray
    target: np.ndarray
    selector: np.ndarray

    def __post_init__(self):
        if self.n_cols < 1 or self.n_rows < 1:
            raise ValidationError("mesh must have at least one element per direction")
        self.dirichlet_dofs = np.asarray(self.dirichlet_dofs, dtype=np.int64).reshape(-1)
        self.dirichlet_values = np.asarray(self.dirichlet_values, dtype=float).reshape(-1)
        nd = self.n_dofs
        for name in ("loads", "target", "selector"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            if arr.size != nd:
                raise ValidationError(f"{name} must have {nd} entries, got {arr.size}")
            setattr(self, name, arr)
        if self.dirichlet_dofs.size != self.dirichlet_values.size:
            raise ValidationError("dirichlet dof/value lengths differ")
        if self.dirichlet_dofs.size == 0:
            raise ValidationError("at least one dirichlet dof is required")
        if self.dirichlet_dofs.min() < 0 or self.dirichlet_dofs.max() >= nd:
            raise ValidationError("dirichlet dof out of range")
        if np.unique(self.dirichlet_dofs).size != self.dirichlet_dofs.size:
            raise ValidationError("duplicate dirichlet dof")
        if not np.isin(self.selector, (0.0, 1.0)).all():
            raise ValidationError("selector entries must be 0 or 1")
        if np.any((self.selector == 0) & (self.target != 0)):
            raise ValidationError("target must be zero off the selected dofs")
        # a prescribed dof may also be targeted only if the two agree
        sel_fixed = self.selector[self.dirichlet_dofs] == 1
        if np.any(sel_fixed & (self.target[self.dirichlet_dofs] != self.dirichlet_values)):
            raise ValidationError("prescribed dof targeted with a conflicting value")

    @property
    def n_elems(self) -> int:
        return self.n_cols * self.n_rows

    @property
    def n_dofs(self) -> int:
        return 2 * (self.n_cols + 1) * (self.n_rows + 1)

    def node_id(self, col: int, row: int) -> int:
        if not (0 <= col <= self.n_cols and 0 <= row <= self.n_rows):
            raise ValidationError(f"node ({col}, {row}) outside mesh")
        return row * (self.n_cols + 1) + col

    def dof(self, col: int, row: int, axis: str) -> int:
        return 2 * self.node_id(col, row) + _AXES[axis]

    def element_id(self, col: int, row: int) -> int:
        if not (0 <= col < self.n_cols and 0 <= row < self.n_rows):
            raise ValidationError(f"element ({col}, {row}) outside mesh")
        return row * self.n_cols + col

    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.dirichlet_dofs] = False
        return np.flatnonzero(mask)


def make_problem(n_cols: int, n_rows: int) -> MacroProblem:
    """Empty problem shell; fill supports and targets afterwards."""
    nd = 2 * (n_cols + 1) * (n_rows + 1)
    return MacroProblem(
        n_cols=n_cols,
        n_rows=n_rows,
        dirichlet_dofs=np.array([0], dtype=np.int64),
        dirichlet_values=np.zeros(1),
        loads=np.zeros(nd),
        target=np.zeros(nd),
        selector=np.zeros(nd),
    )


def pressed_panel_problem(
    n_cols: int = 10, n_rows: int = 4, amplitude: float = 2.5
) -> MacroProblem:
    """Bundled showcase case: a panel pressed between rigid grips.

    The left edge is held in x, the right edge is pushed inward by 4% of
    the panel length, and one corner pins rigid-body translation. The
    design goal is a sinusoidal settlement profile along the row-0 edge
    while the opposite edge stays flat; amplitude scales the requested
    deflection relative to what a uniform panel would produce.
    """
    if n_cols < 2 or n_rows < 1:
        raise ValidationError("panel needs at least 2 columns and 1 row")
    p = make_problem(n_cols, n_rows)
    dofs, vals = [], []
    for j in range(n_rows + 1):
        dofs.append(p.dof(0, j, "x"))
        vals.append(0.0)
        dofs.append(p.dof(n_cols, j, "x"))
        vals.append(-0.04 * n_cols)
    dofs.append(p.dof(0, n_rows, "y"))
    vals.append(0.0)
    selector = np.zeros(p.n_dofs)
    target = np.zeros(p.n_dofs)
    for i in range(n_cols + 1):
        d = p.dof(i, 0, "y")
        selector[d] = 1.0
        # 0.0671 is the uniform-panel response scale for this shortening
        target[d] = -0.0671 * amplitude * (0.85 + 0.30 * np.sin(np.pi * i / n_cols))
        d = p.dof(i, n_rows, "y")
        selector[d] = 1.0
    return MacroProblem(
        n_cols=n_cols,
        n_rows=n_rows,
        dirichlet_dofs=np.array(dofs, dtype=np.int64),
        dirichlet_values=np.array(vals),
        loads=np.zeros(p.n_dofs),
        target=target,
        selector=selector,
    )


@dataclass
class PropertyField:
    """Per-element stiffness tuples plus the component box they live in."""

    values: np.ndarray  # (n_elems, 4)
    bounds: np.ndarray  # (4, 2) min/max per component

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.bounds = np.asarray(self.bounds, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != 4:
            raise ValidationError(f"expected (n, 4) values, got {self.values.shape}")
        if self.bounds.shape != (4, 2):
            raise ValidationError("bounds must be (4, 2)")
        tol = 1e-9 * (1.0 + np.abs(self.bounds).max())
        low_ok = (self.values >= self.bounds[:, 0] - tol).all()
        high_ok = (self.values <= self.bounds[:, 1] + tol).all()
        if not (low_ok and high_ok):
            raise ValidationError("property values leave the component bounds")

    def element(self, e: int) -> StiffnessComponents:
        return StiffnessComponents.from_array(self.values[e])

    def save_csv(self, path):
        with open(path, "w") as fh:
            fh.write("element,c11,c12,c22,c33\n")
            for e, row in enumerate(self.values):
                vals = ",".join(repr(float(v)) for v in row)
                fh.write(f"{e},{vals}\n")


def load_field_csv(path, bounds: np.ndarray) -> PropertyField:
    """Read a field written by PropertyField.save_csv; bounds come separately."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "element,c11,c12,c22,c33":
            raise FileFormatError(f"{path}: unexpected header {header!r}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            parts = line.strip().split(",")
            if len(parts) != 5:
                raise FileFormatError(f"{path}:{lineno}: expected 5 columns")
            try:
                e = int(parts[0])
                vals = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise FileFormatError(f"{path}:{lineno}: {exc}") from None
            if e != len(rows):
                raise FileFormatError(f"{path}:{lineno}: element ids must run 0,1,2,...")
            rows.append(vals)
    if not rows:
        raise FileFormatError(f"{path}: no field rows")
    return PropertyField(values=np.array(rows), bounds=bounds)


@lru_cache(maxsize=32)
def _mesh_dofs(n_cols: int, n_rows: int) -> np.ndarray:
    """(n_elems, 8) dof table, corner order matching the cell element."""
    jj, ii = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    i = ii.ravel()
    j = jj.ravel()
    stride = n_cols + 1
    nodes = np.stack(
        [j * stride + i, j * stride + i + 1, (j + 1) * stride + i + 1, (j + 1) * stride + i],
        axis=1,
    )
    edof = np.empty((n_cols * n_rows, 8), dtype=np.int64)
    edof[:, 0::2] = 2 * nodes
    edof[:, 1::2] = 2 * nodes + 1
    return edof


def assemble_global(problem: MacroProblem, values: np.ndarray):
    """Unconstrained global stiffness (CSC) for per-element property rows."""
    values = np.asarray(values, dtype=float).reshape(problem.n_elems, 4)
    edof = _mesh_dofs(problem.n_cols, problem.n_rows)
    ke = np.einsum("ek,kij->eij", values, element_component_matrices())
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    nd = problem.n_dofs
    return coo_matrix((ke.ravel(), (rows, cols)), shape=(nd, nd)).tocsc()


class _Solution:
    """Displacement plus the factorized free block, reused by the adjoint."""

    __slots__ = ("u", "lu", "free")

    def __init__(self, u, lu, free):
        self.u = u
        self.lu = lu
        self.free = free


def _solve_system(problem: MacroProblem, values: np.ndarray) -> _Solution:
    kmat = assemble_global(problem, values)
    free = problem.free_dofs()
    fixed = problem.dirichlet_dofs
    u = np.zeros(problem.n_dofs)
    u[fixed] = problem.dirichlet_values
    rhs = problem.loads[free] - kmat[free][:, fixed] @ problem.dirichlet_values
    try:
        lu = splu(kmat[free][:, free].tocsc(), permc_spec="MMD_AT_PLUS_A")
        uf = lu.solve(rhs)
    except RuntimeError as exc:
        raise SolverFailure(f"macro solve failed: {exc}") from exc
    if not np.isfinite(uf).all():
        raise SolverFailure("macro solve produced non-finite displacements")
    u[free] = uf
    return _Solution(u, lu, free)


def assemble_and_solve(problem: MacroProblem, field: PropertyField) -> np.ndarray:
    """Displacement under the prescribed supports and loads."""
    return _solve_system(problem, field.values).u


def objective_and_rrmse(u: np.ndarray, problem: MacroProblem) -> tuple[float, float]:
    """Squared target miss and its size relative to the target norm."""
    residual = problem.selector * u - problem.target
    norm_t = np.linalg.norm(problem.target)
    if norm_t == 0.0:
        raise ValidationError("target vector is zero; relative error undefined")
    return float(residual @ residual), float(np.linalg.norm(residual) / norm_t)


def _sensitivities(problem: MacroProblem, sol: _Solution) -> np.ndarray:
    """(n_elems, 4) gradient of the objective w.r.t. each property entry.

    One adjoint solve on the free block; the c12 column accounts for both
    symmetric off-diagonal entries of the element tensor at once.
    """
    residual = problem.selector * sol.u - problem.target
    lam = np.zeros(problem.n_dofs)
    lam[sol.free] = sol.lu.solve(2.0 * residual[sol.free])
    edof = _mesh_dofs(problem.n_cols, problem.n_rows)
    ue = sol.u[edof]
    le = lam[edof]
    return -np.einsum("ei,kij,ej->ek", le, element_component_matrices(), ue)


def adjoint_sensitivities(u: np.ndarray, problem: MacroProblem, field: PropertyField) -> np.ndarray:
    sol = _solve_system(problem, field.values)
    if not np.allclose(sol.u, u, rtol=1e-10, atol=1e-12):
        raise ValidationError("displacement does not match the field solve")
    return _sensitivities(problem, sol)


@dataclass(frozen=True)
class SignedDistanceField:
    """Signed distance to the sampled property region, standardized axes.

    Positive inside. Queries are clamped to the grid box (with a warning)
    and gradients are returned in raw property units.
    """

    grid: OccupancyField
    standardizer: PropertyStandardizer
    bounds: np.ndarray  # (4, 2) raw min/max of the source samples
    centroid: np.ndarray  # (4,) raw mean of the source samples
    resolution: int

    def query(self, comp) -> tuple[float, np.ndarray]:
        if isinstance(comp, StiffnessComponents):
            comp = comp.as_array()
        value, grad = self.query_many(np.asarray(comp, dtype=float).reshape(1, 4))
        return float(value[0]), grad[0]

    def query_many(self, comps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized query: (n, 4) raw tuples to (phi (n,), grad (n, 4))."""
        p = self.standardizer.transform(np.asarray(comps, dtype=float).reshape(-1, 4))
        value, grad, outside = self.grid.value_and_gradient(p)
        if outside.any():
            warnings.warn("property query outside the distance grid; clamped", stacklevel=2)
        return value, grad / self.standardizer.std


def build_sdf(
    db_properties: np.ndarray, resolution: int = 12, r_occ: float = 1.5
) -> SignedDistanceField:
    """Distance field over the 4 property axes of a sampled database.

    r_occ controls how far the occupied region is dilated beyond the
    samples, in mean grid spacings; smaller keeps the feasible set tighter
    to physically realized property combinations.
    """
    props = np.asarray(db_properties, dtype=float)
    if props.ndim != 2 or props.shape[1] != 4:
        raise ValidationError(f"expected (n, 4) properties, got {props.shape}")
    if props.shape[0] < 100:
        raise ValidationError("need at least 100 property samples for a distance field")
    if np.allclose(props.std(axis=0), 0.0):
        raise ValidationError("degenerate properties: all samples identical")
    std = PropertyStandardizer.fit(props)
    grid = build_occupancy_sdf(std.transform(props), resolution=resolution, r_occ=r_occ)
    bounds = np.stack([props.min(axis=0), props.max(axis=0)], axis=1)
    return SignedDistanceField(
        grid=grid,
        standardizer=std,
        bounds=bounds,
        centroid=props.mean(axis=0),
        resolution=resolution,
    )


def feasibility_phi(comp, sdf: SignedDistanceField) -> tuple[float, np.ndarray]:
    """Signed distance and its raw-unit gradient at one property tuple."""
    return sdf.query(comp)


def aggregate_constraint(phis: np.ndarray, beta: float = 10.0) -> tuple[float, np.ndarray]:
    """Smoothed infeasible fraction g and dg/dphi_e.

    g = mean of S(-phi) with S the tanh step; the field is feasible when
    g <= 1/n, i.e. at most "one element's worth" of infeasibility.
    """
    if beta <= 0:
        raise ValidationError("beta must be positive")
    phis = np.asarray(phis, dtype=float)
    n = phis.size
    t = np.tanh(beta * phis)
    g = float(np.mean(0.5 * (1.0 - t)))
    dg = -0.5 * beta * (1.0 - t * t) / n
    return g, dg


@dataclass(frozen=True)
class OptimConfig:
    beta: float = 10.0
    max_iters: int = 500
    move_tol: float = 1e-3
    mode: str = "database"  # or "family"
    beta_continuation: bool = False  # ramp 2 -> 20 over the run
    mma: MmaOptions = field(default_factory=MmaOptions)

    def __post_init__(self):
        if self.beta <= 0:
            raise ValidationError("beta must be positive")
        if self.mode not in ("database", "family"):
            raise ValidationError(f"unknown mode {self.mode!r}")


@dataclass
class OptimHistory:
    """Per-iteration scalars of one optimization run."""

    objective: list = field(default_factory=list)
    rrmse: list = field(default_factory=list)
    constraint: list = field(default_factory=list)
    max_move: list = field(default_factory=list)

    def append(self, f, rrmse, g, move):
        self.objective.append(float(f))
        self.rrmse.append(float(rrmse))
        self.constraint.append(float(g))
        self.max_move.append(float(move))

    def __len__(self):
        return len(self.objective)

    def save_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,objective,rrmse,constraint,max_move\n")
            rows = zip(self.objective, self.rrmse, self.constraint, self.max_move)
            for i, (f, r, g, m) in enumerate(rows):
                fh.write(f"{i},{repr(float(f))},{repr(float(r))},{repr(float(g))},{repr(float(m))}\n")


def _beta_at(cfg: OptimConfig, it: int) -> float:
    if not cfg.beta_continuation:
        return cfg.beta
    frac = it / max(cfg.max_iters - 1, 1)
    return 2.0 + 18.0 * min(frac, 1.0)


def optimize_properties(problem: MacroProblem, region, cfg: OptimConfig = OptimConfig()):
    """MMA design of the per-element property field.

    region selects the mode: a SignedDistanceField optimizes all four
    components per element inside the sampled property region; a
    GradationCurve optimizes one controlled value per element along the
    curve. Returns (PropertyField, OptimHistory).
    """
    if isinstance(region, SignedDistanceField):
        if cfg.mode != "database":
            raise ValidationError("distance-field region requires database mode")
        return _optimize_database(problem, region, cfg)
    if isinstance(region, GradationCurve):
        if cfg.mode != "family":
            raise ValidationError("gradation-curve region requires family mode")
        return _optimize_family(problem, region, cfg)
    raise ValidationError(f"unsupported region {type(region).__name__}")


def _run_mma_loop(x, xmin, xmax, evaluate, cfg: OptimConfig, guard=None):
    """Shared outer loop: evaluate -> MMA step -> safeguard -> move check.

    evaluate(x, it) returns (f0, df0, fval, dfdx, rrmse, g_report). The
    objective gradient is scaled once by the initial objective so MMA sees
    O(1) numbers regardless of target magnitude. guard, when given, maps a
    proposed iterate to an accepted one (feasibility backtracking).
    """
    n = x.size
    history = OptimHistory()
    low = np.empty(n)
    upp = np.empty(n)
    xold1 = x.copy()
    xold2 = x.copy()
    f_scale = None
    failures = 0
    for it in range(cfg.max_iters):
        f0, df0, fval, dfdx, rrmse, g_report = evaluate(x, it)
        if f_scale is None:
            f_scale = 1.0 / max(f0, 1e-12)
        try:
            x_new, low, upp = mma_step(
                it, x, xmin, xmax, xold1, xold2, f_scale * df0, fval, dfdx, low, upp, cfg.mma
            )
            failures = 0
        except SolverFailure:
            failures += 1
            if failures >= 5:
                raise
            # fresh asymptotes, half-range spread, and try again next round
            low = x - cfg.mma.asyinit * (xmax - xmin)
            upp = x + cfg.mma.asyinit * (xmax - xmin)
            history.append(f0, rrmse, g_report, np.nan)
            continue
        if guard is not None:
            x_new = guard(x, x_new)
        move = float(np.abs(x_new - x).max())
        history.append(f0, rrmse, g_report, move)
        xold2, xold1, x = xold1, x, x_new
        if move < cfg.move_tol:
            break
    return x, history


def _optimize_database(problem: MacroProblem, sdf: SignedDistanceField, cfg: OptimConfig):
    n_e = problem.n_elems
    lo = sdf.bounds[:, 0]
    span = np.maximum(sdf.bounds[:, 1] - lo, 1e-12)
    x0 = np.tile((sdf.centroid - lo) / span, n_e)  # scaled to [0, 1] per component

    def unscale(x):
        return lo[None, :] + x.reshape(n_e, 4) * span[None, :]

    def evaluate(x, it):
        values = unscale(x)
        sol = _solve_system(problem, values)
        f0, rrmse = objective_and_rrmse(sol.u, problem)
        dfdc = _sensitivities(problem, sol)
        beta = _beta_at(cfg, it)
        phis, dphi = sdf.query_many(values)
        g, dg_dphi = aggregate_constraint(phis, beta)
        # single inequality n*g - 1 <= 0 in the scaled variables
        fval = np.array([n_e * g - 1.0])
        dcon = (n_e * dg_dphi[:, None] * dphi) * span[None, :]
        df0 = (dfdc * span[None, :]).ravel()
        return f0, df0, fval, dcon.ravel()[None, :], rrmse, g

    def guard(x_old, x_new):
        # the sharpened step saturates, so an element that crosses the whole
        # transition band in one move would feel no restoring gradient; back
        # any element that left the region off along its own step instead
        old = x_old.reshape(n_e, 4)
        new = x_new.reshape(n_e, 4)
        alpha = np.ones(n_e)
        for _ in range(40):
            trial = old + alpha[:, None] * (new - old)
            phis, _ = sdf.query_many(unscale(trial.ravel()))
            bad = phis < 0.0
            if not bad.any():
                break
            alpha[bad] *= 0.5
        else:
            trial = np.where((phis < 0.0)[:, None], old, trial)
        return trial.ravel()

    x, history = _run_mma_loop(x0, np.zeros(x0.size), np.ones(x0.size), evaluate, cfg, guard)
    values = unscale(x)
    phis, _ = sdf.query_many(values)
    if phis.min() < -1e-3:
        raise SolverFailure(
            f"element distance {phis.min():.3e} left the sampled property region"
        )
    return PropertyField(values=values, bounds=sdf.bounds), history


def _curve_values_and_jac(curve: GradationCurve, t: np.ndarray, h_frac: float = 1e-6):
    """Curve points and dC/dt by central differences, clamped at the ends."""
    h = h_frac * curve.c_max
    values = np.empty((t.size, 4))
    jac = np.empty((t.size, 4))
    for e, te in enumerate(t):
        values[e] = curve(float(te)).as_array()
        hi = min(te + h, curve.c_max)
        lo = max(te - h, 0.0)
        jac[e] = (curve(hi).as_array() - curve(lo).as_array()) / (hi - lo)
    return values, jac


def _optimize_family(problem: MacroProblem, curve: GradationCurve, cfg: OptimConfig):
    n_e = problem.n_elems
    c_max = curve.c_max
    x0 = np.full(n_e, 0.5)  # scaled controlled value, start mid-curve

    def evaluate(x, it):
        t = x * c_max
        values, jac = _curve_values_and_jac(curve, t)
        sol = _solve_system(problem, values)
        f0, rrmse = objective_and_rrmse(sol.u, problem)
        dfdc = _sensitivities(problem, sol)
        df0 = (dfdc * jac).sum(axis=1) * c_max
        # staying on the curve is built into the parameterization; the
        # optimizer still needs one (vacuous) inequality row
        fval = np.array([-1.0])
        dcon = np.zeros((1, n_e))
        return f0, df0, fval, dcon, rrmse, 0.0

    x, history = _run_mma_loop(x0, np.zeros(n_e), np.ones(n_e), evaluate, cfg)
    values, _ = _curve_values_and_jac(curve, x * c_max)
    lo = values.min(axis=0)
    hi = values.max(axis=0)
    pad = 1e-9 + 1e-9 * np.abs(hi)
    bounds = np.stack([lo - pad, hi + pad], axis=1)
    return PropertyField(values=values, bounds=bounds), history


def save_problem(problem: MacroProblem, path, mode: str = "database", curve: str = ""):
    """Plain-text problem file: mesh line, then one line per condition."""
    with open(path, "w") as fh:
        fh.write("# macro design problem\n")
        fh.write(f"mesh {problem.n_cols} {problem.n_rows}\n")
        fh.write(f"mode {mode}\n")
        if curve:
            fh.write(f"curve {curve}\n")
        axes = ("x", "y")
        for d, v in zip(problem.dirichlet_dofs, problem.dirichlet_values):
            fh.write(f"fix {d // 2} {axes[d % 2]} {repr(float(v))}\n")
        for d in np.flatnonzero(problem.loads):
            fh.write(f"load {d // 2} {axes[d % 2]} {repr(float(problem.loads[d]))}\n")
        for d in np.flatnonzero(problem.selector):
            fh.write(f"target {d // 2} {axes[d % 2]} {repr(float(problem.target[d]))}\n")


def load_problem(path) -> tuple[MacroProblem, dict]:
    """Read a problem file; returns the problem and run metadata."""
    mesh = None
    fixes: list[tuple[int, float]] = []
    loads: list[tuple[int, float]] = []
    targets: list[tuple[int, float]] = []
    meta = {"mode": "database", "curve": ""}

    def parse_dof(parts, lineno):
        try:
            node = int(parts[1])
            axis = _AXES[parts[2]]
            value = float(parts[3])
        except (ValueError, KeyError, IndexError):
            raise FileFormatError(f"{path}:{lineno}: bad condition line") from None
        if mesh is None:
            raise FileFormatError(f"{path}:{lineno}: condition before mesh line")
        n_nodes = (mesh[0] + 1) * (mesh[1] + 1)
        if not 0 <= node < n_nodes:
            raise FileFormatError(f"{path}:{lineno}: node {node} outside mesh")
        return 2 * node + axis, value

    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            kind = parts[0]
            if kind == "mesh":
                try:
                    mesh = (int(parts[1]), int(parts[2]))
                except (ValueError, IndexError):
                    raise FileFormatError(f"{path}:{lineno}: bad mesh line") from None
            elif kind == "mode":
                if len(parts) != 2 or parts[1] not in ("database", "family"):
                    raise FileFormatError(f"{path}:{lineno}: bad mode line")
                meta["mode"] = parts[1]
            elif kind == "curve":
                if len(parts) != 2:
                    raise FileFormatError(f"{path}:{lineno}: bad curve line")
                meta["curve"] = parts[1]
            elif kind == "fix":
                fixes.append(parse_dof(parts, lineno))
            elif kind == "load":
                loads.append(parse_dof(parts, lineno))
            elif kind == "target":
                targets.append(parse_dof(parts, lineno))
            else:
                raise FileFormatError(f"{path}:{lineno}: unknown directive {kind!r}")
    if mesh is None:
        raise FileFormatError(f"{path}: missing mesh line")
    n_cols, n_rows = mesh
    nd = 2 * (n_cols + 1) * (n_rows + 1)
    load_vec = np.zeros(nd)
    for d, v in loads:
        load_vec[d] = v
    target = np.zeros(nd)
    selector = np.zeros(nd)
    for d, v in targets:
        target[d] = v
        selector[d] = 1.0
    problem = MacroProblem(
        n_cols=n_cols,
        n_rows=n_rows,
        dirichlet_dofs=np.array([d for d, _ in fixes], dtype=np.int64),
        dirichlet_values=np.array([v for _, v in fixes]),
        loads=load_vec,
        target=target,
        selector=selector,
    )
    return problem, meta
