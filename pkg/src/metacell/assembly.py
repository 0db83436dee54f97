"""Tiling the optimized design mesh with compatible database cells.

Each macro element gets a diverse candidate shortlist; choosing one cell
per element is cast as energy minimization on the element grid, with unary
costs for property mismatch and pairwise costs for geometric and mechanical
seam incompatibility. The grid problem is solved by dual decomposition into
row and column chains, which yields a lower bound alongside the labeling,
so optimality gaps are measurable and often certified zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FileFormatError, NoFeasibleCandidate, ValidationError
from .homogenization import (
    BoundaryStressTraces,
    PropertyStandardizer,
    StiffnessComponents,
)
from .latentops import diverse_candidates
from .macroopt import MacroProblem, PropertyField, _solve_system, objective_and_rrmse
from .microstructure import Microstructure, boundary_strip

_ORIENTATIONS = ("horizontal", "vertical")


def nodal_weight(c: StiffnessComponents, target: StiffnessComponents, standardizer=None) -> float:
    """Worst componentwise property miss, in standardized units."""
    if standardizer is None:
        standardizer = PropertyStandardizer.identity()
    d = standardizer.transform(c.as_array()) - standardizer.transform(target.as_array())
    return float(np.abs(d).max())


def _touching_strips(orientation: str):
    if orientation == "horizontal":
        return "right", "left"
    if orientation == "vertical":
        return "bottom", "top"
    raise ValidationError(f"orientation must be one of {_ORIENTATIONS}, got {orientation!r}")


def geometric_incompat(m_i: Microstructure, m_j: Microstructure, orientation: str) -> float:
    """Mismatched fraction of the solid union on the shared boundary.

    0 means every solid pixel continues across the seam; a fully void
    interface counts as 1 since nothing can connect through it.
    """
    side_i, side_j = _touching_strips(orientation)
    if m_i.shape != m_j.shape:
        raise ValidationError("microstructures must share the grid size")
    a = boundary_strip(m_i, side_i).astype(bool)
    b = boundary_strip(m_j, side_j).astype(bool)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return float((a ^ b).sum() / union)


def mechanical_incompat(
    t_i: BoundaryStressTraces,
    t_j: BoundaryStressTraces,
    orientation: str,
    quiet: float = 1e-3,
    eps_den: float = 1e-12,
) -> float:
    """Relative traction mismatch across the seam, summed over load cases.

    Two traction-free sides mean no load path at all, the worst score.
    """
    side_i, side_j = _touching_strips(orientation)
    a = t_i.side(side_i)
    b = t_j.side(side_j)
    if a.shape != b.shape:
        raise ValidationError("trace shapes differ across the seam")
    if a.max() < quiet and b.max() < quiet:
        return 1.0
    return float(np.abs(a - b).sum() / max((np.abs(a) + np.abs(b)).sum(), eps_den))


@dataclass
class AssemblyGraph:
    """Grid MRF: one node per macro element, 4-neighbor pairwise tables."""

    n_rows: int
    n_cols: int
    candidate_ids: list  # per node (row-major), list of database ids
    unary: list  # per node, (n_labels,) array
    h_tables: dict  # (row, col) -> table between (row,col) and (row,col+1)
    v_tables: dict  # (row, col) -> table between (row,col) and (row+1,col)

    @property
    def n_nodes(self) -> int:
        return self.n_rows * self.n_cols

    def node(self, row: int, col: int) -> int:
        if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
            raise ValidationError(f"node ({row}, {col}) outside grid")
        return row * self.n_cols + col

    def labels_at(self, node: int) -> int:
        return len(self.candidate_ids[node])

    def edges(self):
        """Yields (node_a, node_b, table) over all grid edges."""
        for (r, c), tab in self.h_tables.items():
            yield self.node(r, c), self.node(r, c + 1), tab
        for (r, c), tab in self.v_tables.items():
            yield self.node(r, c), self.node(r + 1, c), tab


def evaluate_labeling(graph: AssemblyGraph, assignment) -> float:
    """Total energy of one choice per node; independent of the solver."""
    assignment = np.asarray(assignment, dtype=int)
    if assignment.size != graph.n_nodes:
        raise ValidationError("assignment length != node count")
    total = 0.0
    for i in range(graph.n_nodes):
        total += float(graph.unary[i][assignment[i]])
    for a, b, tab in graph.edges():
        total += float(tab[assignment[a], assignment[b]])
    return total


def build_assembly_graph(
    field: PropertyField,
    db,
    n_rows: int,
    n_cols: int,
    n_candidates: int = 10,
    geo_weight: float = 1.0,
    mech_weight: float = 1.0,
    clustering_seed: int = 0,
) -> AssemblyGraph:
    """Candidate shortlists per element plus all seam cost tables.

    Traces are pulled from the database cache, so repeated ids across
    shortlists cost one boundary solve each.
    """
    if field.values.shape[0] != n_rows * n_cols:
        raise ValidationError("field size does not match the element grid")
    std = db.standardizer()
    candidate_ids = []
    unary = []
    topped_up = 0
    for e in range(n_rows * n_cols):
        target = StiffnessComponents.from_array(field.values[e])
        try:
            cand = diverse_candidates(
                db, target, n_clusters=n_candidates, clustering_seed=clustering_seed
            )
        except NoFeasibleCandidate as exc:
            raise NoFeasibleCandidate(f"element {e}: {exc}") from exc
        if cand.n_admitted < len(cand.entries):
            topped_up += 1
        ids = cand.ids()
        candidate_ids.append(ids)
        unary.append(
            np.array([nodal_weight(db.get(r).props, target, std) for r in ids])
        )
    if topped_up:
        warnings.warn(
            f"{topped_up} of {n_rows * n_cols} element targets sit outside the "
            "strict retrieval radius; nearest records were used there",
            stacklevel=2,
        )

    def table(ids_a, ids_b, orientation):
        out = np.empty((len(ids_a), len(ids_b)))
        for la, ra in enumerate(ids_a):
            ma = db.get(ra).micro
            ta = db.traces(ra)
            for lb, rb in enumerate(ids_b):
                geo = geometric_incompat(ma, db.get(rb).micro, orientation)
                mech = mechanical_incompat(ta, db.traces(rb), orientation)
                out[la, lb] = geo_weight * geo + mech_weight * mech
        return out

    h_tables = {}
    v_tables = {}
    for r in range(n_rows):
        for c in range(n_cols):
            i = r * n_cols + c
            if c + 1 < n_cols:
                h_tables[(r, c)] = table(candidate_ids[i], candidate_ids[i + 1], "horizontal")
            if r + 1 < n_rows:
                v_tables[(r, c)] = table(candidate_ids[i], candidate_ids[i + n_cols], "vertical")
    return AssemblyGraph(
        n_rows=n_rows,
        n_cols=n_cols,
        candidate_ids=candidate_ids,
        unary=unary,
        h_tables=h_tables,
        v_tables=v_tables,
    )


@dataclass
class Labeling:
    """Best labeling found plus the certificate data."""

    assignment: np.ndarray
    energy: float
    lower_bound: float
    iterations: int
    converged: bool

    def __post_init__(self):
        if self.lower_bound > self.energy + 1e-9 * (1.0 + abs(self.energy)):
            raise ValidationError("lower bound exceeds the labeling energy")

    def gap(self) -> float:
        return self.energy - self.lower_bound


def _chain_minsum(unaries, tables):
    """Exact min-sum on a chain.

    Returns (min energy, argmin labels, per-node min-marginals). unaries is
    a list of (n_l,) arrays; tables[k] couples node k and k+1.
    """
    n = len(unaries)
    fwd = [unaries[0]]
    back_ptr = [None]
    for k in range(1, n):
        tot = fwd[k - 1][:, None] + tables[k - 1]
        back_ptr.append(np.argmin(tot, axis=0))
        fwd.append(unaries[k] + tot.min(axis=0))
    bwd = [np.zeros_like(u) for u in unaries]
    for k in range(n - 2, -1, -1):
        tot = tables[k] + (unaries[k + 1] + bwd[k + 1])[None, :]
        bwd[k] = tot.min(axis=1)
    energy = float(fwd[-1].min())
    labels = np.empty(n, dtype=int)
    labels[-1] = int(np.argmin(fwd[-1]))
    for k in range(n - 1, 0, -1):
        labels[k - 1] = int(back_ptr[k][labels[k]])
    marginals = [f + b for f, b in zip(fwd, bwd)]
    return energy, labels, marginals


def dd_mrf_solve(
    graph: AssemblyGraph, max_iters: int = 5000, gap_tol: float = 1e-9, history=None
) -> Labeling:
    """Dual decomposition into row and column chains.

    Every node sits in exactly one row chain and one column chain; its
    unary cost is split in half and a per-label offset (the dual variable)
    shifts weight between the two copies. Chains are solved exactly each
    iteration; the offsets follow a projected subgradient step with an
    adaptive step length. The best primal labeling seen is returned with
    the best dual lower bound; converged means the gap closed to tolerance.
    Passing a list as history appends (dual, best primal) per iteration.
    """
    n_nodes = graph.n_nodes
    n_rows, n_cols = graph.n_rows, graph.n_cols
    lam = [np.zeros(graph.labels_at(i)) for i in range(n_nodes)]
    best_dual = -np.inf
    best_primal = np.inf
    best_assignment = None
    decay = 1.0
    iters_done = 0
    converged = False

    def row_nodes(r):
        return [r * n_cols + c for c in range(n_cols)]

    def col_nodes(c):
        return [r * n_cols + c for r in range(n_rows)]

    for it in range(max_iters):
        iters_done = it + 1
        row_lab = np.empty(n_nodes, dtype=int)
        col_lab = np.empty(n_nodes, dtype=int)
        vote = [None] * n_nodes
        dual = 0.0
        for r in range(n_rows):
            nodes = row_nodes(r)
            unaries = [0.5 * graph.unary[i] + lam[i] for i in nodes]
            tables = [graph.h_tables[(r, c)] for c in range(n_cols - 1)]
            e, labels, marg = _chain_minsum(unaries, tables)
            dual += e
            for i, l, m in zip(nodes, labels, marg):
                row_lab[i] = l
                vote[i] = m
        for c in range(n_cols):
            nodes = col_nodes(c)
            unaries = [0.5 * graph.unary[i] - lam[i] for i in nodes]
            tables = [graph.v_tables[(r, c)] for r in range(n_rows - 1)]
            e, labels, marg = _chain_minsum(unaries, tables)
            dual += e
            for i, l, m in zip(nodes, labels, marg):
                col_lab[i] = l
                vote[i] = vote[i] + m

        improved = dual > best_dual
        best_dual = max(best_dual, dual)

        vote_lab = np.array([int(np.argmin(v)) for v in vote])
        for cand in (vote_lab, row_lab, col_lab):
            energy = evaluate_labeling(graph, cand)
            if energy < best_primal:
                best_primal = energy
                best_assignment = cand.copy()

        if dual > best_primal + 1e-9 * (1.0 + abs(best_primal)):
            raise ValidationError("dual bound exceeded a labeling energy")
        if history is not None:
            history.append((dual, best_primal))

        if best_primal - best_dual <= gap_tol * (1.0 + abs(best_dual)):
            converged = True
            break

        grad = []
        grad_sq = 0.0
        for i in range(n_nodes):
            g = np.zeros(graph.labels_at(i))
            g[row_lab[i]] += 1.0
            g[col_lab[i]] -= 1.0
            grad.append(g)
            grad_sq += float(g @ g)
        if grad_sq == 0.0:
            # chains agree: that labeling is optimal for this lambda
            converged = best_primal - best_dual <= gap_tol * (1.0 + abs(best_dual))
            break
        if not improved:
            decay *= 0.95
        step = decay * (best_primal - dual) / grad_sq
        for i in range(n_nodes):
            lam[i] = lam[i] + step * grad[i]

    return Labeling(
        assignment=best_assignment,
        energy=best_primal,
        lower_bound=best_dual,
        iterations=iters_done,
        converged=converged,
    )


def stitch_bitmap(labeling: Labeling, graph: AssemblyGraph, db) -> np.ndarray:
    """Selected cells concatenated into one binary pixel array."""
    rows = []
    for r in range(graph.n_rows):
        cells = [
            db.get(graph.candidate_ids[graph.node(r, c)][labeling.assignment[graph.node(r, c)]]).micro.cells
            for c in range(graph.n_cols)
        ]
        rows.append(np.hstack(cells))
    return np.vstack(rows)


def chosen_record_ids(labeling: Labeling, graph: AssemblyGraph) -> np.ndarray:
    """(n_rows, n_cols) grid of selected database ids."""
    out = np.empty((graph.n_rows, graph.n_cols), dtype=np.int64)
    for r in range(graph.n_rows):
        for c in range(graph.n_cols):
            i = graph.node(r, c)
            out[r, c] = graph.candidate_ids[i][labeling.assignment[i]]
    return out


def evaluate_selection(chosen: np.ndarray, problem: MacroProblem, db):
    """Assembled structure plus how well the id grid serves the target.

    The macro FEM is re-solved with each selected cell's actual properties;
    seam quality is summarized by the mean geometric and mechanical
    incompatibility over interior edges of the selection.
    """
    chosen = np.asarray(chosen, dtype=np.int64)
    if chosen.shape != (problem.n_rows, problem.n_cols):
        raise ValidationError("selection grid does not match the problem mesh")
    n_rows, n_cols = chosen.shape
    rows = []
    for r in range(n_rows):
        rows.append(np.hstack([db.get(int(i)).micro.cells for i in chosen[r]]))
    bitmap = np.vstack(rows)
    values = np.array([db.get(int(i)).props.as_array() for i in chosen.ravel()])
    sol = _solve_system(problem, values)
    _, rrmse = objective_and_rrmse(sol.u, problem)
    geo = []
    mech = []
    for r in range(n_rows):
        for c in range(n_cols):
            i = int(chosen[r, c])
            if c + 1 < n_cols:
                j = int(chosen[r, c + 1])
                geo.append(geometric_incompat(db.get(i).micro, db.get(j).micro, "horizontal"))
                mech.append(mechanical_incompat(db.traces(i), db.traces(j), "horizontal"))
            if r + 1 < n_rows:
                j = int(chosen[r + 1, c])
                geo.append(geometric_incompat(db.get(i).micro, db.get(j).micro, "vertical"))
                mech.append(mechanical_incompat(db.traces(i), db.traces(j), "vertical"))
    return bitmap, float(rrmse), float(np.mean(geo)), float(np.mean(mech))


def stitch_and_evaluate(labeling: Labeling, graph: AssemblyGraph, problem: MacroProblem, db):
    """evaluate_selection on the ids a labeling picks out of a graph."""
    if problem.n_rows != graph.n_rows or problem.n_cols != graph.n_cols:
        raise ValidationError("problem mesh does not match the assembly grid")
    return evaluate_selection(chosen_record_ids(labeling, graph), problem, db)


def save_labeling(labeling: Labeling, graph: AssemblyGraph, path) -> None:
    """CSV of the selected database id per grid position."""
    chosen = chosen_record_ids(labeling, graph)
    with open(path, "w") as fh:
        fh.write("row,col,record_id\n")
        for r in range(graph.n_rows):
            for c in range(graph.n_cols):
                fh.write(f"{r},{c},{chosen[r, c]}\n")


def load_labeling(path) -> np.ndarray:
    """Read a save_labeling CSV back into an id grid."""
    entries = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "row,col,record_id":
            raise FileFormatError(f"{path}: unexpected header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.strip().split(",")
            if len(parts) != 3:
                raise FileFormatError(f"{path}:{lineno}: expected 3 columns")
            try:
                r, c, rid = (int(v) for v in parts)
            except ValueError as exc:
                raise FileFormatError(f"{path}:{lineno}: {exc}") from None
            if (r, c) in entries:
                raise FileFormatError(f"{path}:{lineno}: duplicate position ({r}, {c})")
            entries[(r, c)] = rid
    if not entries:
        raise FileFormatError(f"{path}: no labeling rows")
    n_rows = max(r for r, _ in entries) + 1
    n_cols = max(c for _, c in entries) + 1
    if len(entries) != n_rows * n_cols:
        raise FileFormatError(f"{path}: positions do not fill a {n_rows}x{n_cols} grid")
    out = np.empty((n_rows, n_cols), dtype=np.int64)
    for (r, c), rid in entries.items():
        out[r, c] = rid
    return out
