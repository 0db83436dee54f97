"""Seam scores and the grid MRF solver, checked against brute force."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metacell.assembly import (
    AssemblyGraph,
    Labeling,
    dd_mrf_solve,
    evaluate_labeling,
    geometric_incompat,
    load_labeling,
    mechanical_incompat,
)
from metacell.errors import FileFormatError, ValidationError
from metacell.homogenization import BoundaryStressTraces
from metacell.microstructure import Microstructure


def cell_from(cells) -> Microstructure:
    return Microstructure(cells=np.asarray(cells, dtype=np.uint8))


def traces_with(left=None, right=None, top=None, bottom=None, n=4):
    zero = np.zeros((3, n))
    return BoundaryStressTraces(
        left=zero if left is None else np.asarray(left, dtype=float),
        right=zero if right is None else np.asarray(right, dtype=float),
        top=zero if top is None else np.asarray(top, dtype=float),
        bottom=zero if bottom is None else np.asarray(bottom, dtype=float),
    )


# --- geometric seam score ------------------------------------------------


def test_tiling_a_symmetric_cell_is_compatible():
    # mirror-symmetric cell: opposite strips coincide, so self-tiling is seamless
    cross = np.zeros((5, 5), dtype=np.uint8)
    cross[2, :] = 1
    cross[:, 2] = 1
    m = cell_from(cross)
    assert geometric_incompat(m, m, "horizontal") == 0.0
    assert geometric_incompat(m, m, "vertical") == 0.0


def test_identical_asymmetric_cells_can_still_mismatch():
    # the score compares touching strips, not whole cells
    m = cell_from(np.eye(4))
    assert geometric_incompat(m, m, "horizontal") == 1.0


def test_disjoint_strips_score_one():
    a = np.zeros((4, 4), dtype=np.uint8)
    a[:2, -1] = 1  # right strip solid on top half
    a[:, 0] = 1
    b = np.zeros((4, 4), dtype=np.uint8)
    b[2:, 0] = 1  # left strip solid on bottom half
    b[:, -1] = 1
    assert geometric_incompat(cell_from(a), cell_from(b), "horizontal") == 1.0


def test_both_void_interface_scores_one():
    a = np.zeros((4, 4), dtype=np.uint8)
    a[:, 0] = 1  # keep some solid elsewhere
    b = np.zeros((4, 4), dtype=np.uint8)
    b[:, -1] = 1
    assert geometric_incompat(cell_from(a), cell_from(b), "horizontal") == 1.0


def test_partial_overlap_fraction():
    a = np.zeros((4, 4), dtype=np.uint8)
    a[:, -1] = [1, 1, 1, 0]
    b = np.zeros((4, 4), dtype=np.uint8)
    b[:, 0] = [1, 1, 0, 1]
    # union 4, mismatch 2
    assert geometric_incompat(cell_from(a), cell_from(b), "horizontal") == pytest.approx(0.5)


def test_vertical_uses_bottom_against_top():
    a = np.zeros((4, 4), dtype=np.uint8)
    a[-1, :] = 1
    b = np.zeros((4, 4), dtype=np.uint8)
    b[0, :] = 1
    assert geometric_incompat(cell_from(a), cell_from(b), "vertical") == 0.0


def test_bad_orientation_rejected():
    m = cell_from(np.eye(4))
    with pytest.raises(ValidationError):
        geometric_incompat(m, m, "diagonal")


def test_shape_mismatch_rejected():
    with pytest.raises(ValidationError):
        geometric_incompat(cell_from(np.eye(4)), cell_from(np.eye(6)), "horizontal")


# --- mechanical seam score ----------------------------------------------


def test_matching_traces_fully_compatible():
    tr = np.random.default_rng(0).uniform(0.5, 1, (3, 4))
    t = traces_with(left=tr, right=tr)
    assert mechanical_incompat(t, t, "horizontal") == 0.0


def test_quiet_interface_scores_one():
    silent = traces_with()
    assert mechanical_incompat(silent, silent, "horizontal") == 1.0


def test_one_sided_load_path_counts():
    loud = traces_with(right=np.full((3, 4), 1.0))
    silent = traces_with()
    # all traction on one side, none opposite: total mismatch, but not quiet
    val = mechanical_incompat(loud, silent, "horizontal")
    assert val == pytest.approx(1.0)


def test_relative_mismatch_value():
    a = traces_with(right=np.full((3, 4), 1.0))
    b = traces_with(left=np.full((3, 4), 3.0))
    # |1-3| / (1+3) = 0.5 per entry, uniform
    assert mechanical_incompat(a, b, "horizontal") == pytest.approx(0.5)


# --- MRF machinery -------------------------------------------------------


def random_graph(rng, n_rows, n_cols, n_labels) -> AssemblyGraph:
    labels = [n_labels] * (n_rows * n_cols)
    unary = [rng.uniform(0, 1, size=k) for k in labels]
    h_tables = {}
    v_tables = {}
    for r in range(n_rows):
        for c in range(n_cols):
            if c + 1 < n_cols:
                h_tables[(r, c)] = rng.uniform(0, 1, size=(n_labels, n_labels))
            if r + 1 < n_rows:
                v_tables[(r, c)] = rng.uniform(0, 1, size=(n_labels, n_labels))
    ids = [list(range(k)) for k in labels]
    return AssemblyGraph(
        n_rows=n_rows, n_cols=n_cols, candidate_ids=ids,
        unary=unary, h_tables=h_tables, v_tables=v_tables,
    )


def brute_force_optimum(graph: AssemblyGraph) -> float:
    best = np.inf
    sizes = [graph.labels_at(i) for i in range(graph.n_nodes)]
    for assignment in itertools.product(*(range(s) for s in sizes)):
        best = min(best, evaluate_labeling(graph, np.array(assignment)))
    return best


def test_single_node_graph_picks_best_unary():
    g = AssemblyGraph(
        n_rows=1, n_cols=1, candidate_ids=[[10, 11, 12]],
        unary=[np.array([0.7, 0.2, 0.9])], h_tables={}, v_tables={},
    )
    lab = dd_mrf_solve(g)
    assert lab.assignment[0] == 1
    assert lab.converged
    assert lab.energy == pytest.approx(0.2)


def test_chain_graph_is_solved_exactly():
    rng = np.random.default_rng(3)
    g = random_graph(rng, 1, 6, 3)
    lab = dd_mrf_solve(g)
    assert lab.converged
    assert lab.energy == pytest.approx(brute_force_optimum(g), abs=1e-12)


def test_grid_weak_duality_and_history():
    rng = np.random.default_rng(4)
    g = random_graph(rng, 2, 3, 3)
    history = []
    lab = dd_mrf_solve(g, history=history)
    assert len(history) == lab.iterations
    for dual, primal in history:
        assert dual <= primal + 1e-9
    assert lab.lower_bound <= lab.energy + 1e-9


def test_converged_grid_certifies_optimum():
    rng = np.random.default_rng(5)
    g = random_graph(rng, 2, 2, 2)
    lab = dd_mrf_solve(g)
    opt = brute_force_optimum(g)
    assert lab.energy >= opt - 1e-12
    if lab.converged:
        assert lab.energy == pytest.approx(opt, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=100_000))
def test_property_dual_never_exceeds_primal(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 2, 2, rng.integers(2, 4))
    lab = dd_mrf_solve(g, max_iters=300)
    assert lab.lower_bound <= lab.energy + 1e-9
    assert lab.energy >= brute_force_optimum(g) - 1e-12


def test_labeling_rejects_bound_above_energy():
    with pytest.raises(ValidationError):
        Labeling(
            assignment=np.zeros(1, dtype=np.int64),
            energy=1.0,
            lower_bound=2.0,
            iterations=1,
            converged=True,
        )


def test_evaluate_labeling_sums_terms():
    g = AssemblyGraph(
        n_rows=1, n_cols=2, candidate_ids=[[0, 1], [0, 1]],
        unary=[np.array([1.0, 2.0]), np.array([10.0, 20.0])],
        h_tables={(0, 0): np.array([[0.5, 0.6], [0.7, 0.8]])},
        v_tables={},
    )
    assert evaluate_labeling(g, np.array([1, 0])) == pytest.approx(2.0 + 10.0 + 0.7)


# --- labeling persistence ------------------------------------------------


def test_labeling_csv_roundtrip(tmp_path):
    path = tmp_path / "labeling.csv"
    path.write_text("row,col,record_id\n0,0,5\n0,1,9\n1,0,2\n1,1,5\n")
    grid = load_labeling(path)
    assert grid.shape == (2, 2)
    assert grid[0, 1] == 9
    assert grid[1, 1] == 5


def test_labeling_csv_rejects_holes(tmp_path):
    path = tmp_path / "labeling.csv"
    path.write_text("row,col,record_id\n0,0,5\n1,1,2\n")
    with pytest.raises(FileFormatError):
        load_labeling(path)


def test_labeling_csv_rejects_duplicates(tmp_path):
    path = tmp_path / "labeling.csv"
    path.write_text("row,col,record_id\n0,0,5\n0,0,7\n")
    with pytest.raises(FileFormatError):
        load_labeling(path)
