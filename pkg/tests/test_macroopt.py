"""Macro mesh, solves, sensitivities, the design loop, and file formats."""

import numpy as np
import pytest

from metacell.errors import FileFormatError, SolverFailure, ValidationError
from metacell.homogenization import StiffnessComponents
from metacell.macroopt import (
    MacroProblem,
    OptimConfig,
    OptimHistory,
    PropertyField,
    adjoint_sensitivities,
    aggregate_constraint,
    assemble_and_solve,
    assemble_global,
    build_sdf,
    load_field_csv,
    load_problem,
    make_problem,
    objective_and_rrmse,
    optimize_properties,
    save_problem,
)


def random_feasible_values(n_elems: int, rng: np.random.Generator) -> np.ndarray:
    """Stable orthotropic tuples: c12 well below the geometric mean."""
    c11 = rng.uniform(0.3, 1.0, n_elems)
    c22 = rng.uniform(0.3, 1.0, n_elems)
    c12 = 0.3 * np.sqrt(c11 * c22)
    c33 = rng.uniform(0.15, 0.4, n_elems)
    return np.stack([c11, c12, c22, c33], axis=1)


def field_from_values(values: np.ndarray) -> PropertyField:
    lo = values.min(axis=0) - 0.1
    hi = values.max(axis=0) + 0.1
    return PropertyField(values=values, bounds=np.stack([lo, hi], axis=1))


def stretch_problem(n_cols=3, n_rows=3, pull=0.1) -> MacroProblem:
    """Left edge fixed in x, right edge pulled; top edge y targeted."""
    p = make_problem(n_cols, n_rows)
    dofs, vals = [], []
    for j in range(n_rows + 1):
        dofs.append(p.dof(0, j, "x"))
        vals.append(0.0)
        dofs.append(p.dof(n_cols, j, "x"))
        vals.append(pull)
    dofs.append(p.dof(0, n_rows, "y"))
    vals.append(0.0)
    p.dirichlet_dofs = np.array(dofs)
    p.dirichlet_values = np.array(vals)
    sel = np.zeros(p.n_dofs)
    tgt = np.zeros(p.n_dofs)
    for i in range(n_cols + 1):
        d = p.dof(i, 0, "y")
        sel[d] = 1.0
        tgt[d] = -0.01 * (1 + i)
    p.selector = sel
    p.target = tgt
    p.__post_init__()
    return p


# --- mesh bookkeeping ----------------------------------------------------


def test_node_and_dof_numbering():
    p = make_problem(3, 2)
    assert p.node_id(0, 0) == 0
    assert p.node_id(3, 0) == 3
    assert p.node_id(0, 1) == 4
    assert p.dof(1, 1, "x") == 2 * 5
    assert p.dof(1, 1, "y") == 2 * 5 + 1
    assert p.n_elems == 6
    assert p.n_dofs == 2 * 4 * 3


def test_element_numbering_row_major():
    p = make_problem(4, 3)
    assert p.element_id(0, 0) == 0
    assert p.element_id(3, 0) == 3
    assert p.element_id(0, 1) == 4
    assert p.element_id(3, 2) == 11


def test_free_dofs_complement_fixed():
    p = stretch_problem()
    free = p.free_dofs()
    assert set(free) | set(p.dirichlet_dofs) == set(range(p.n_dofs))
    assert set(free) & set(p.dirichlet_dofs) == set()


def test_problem_validation_rejects_conflicts():
    p = make_problem(2, 2)
    p.selector = np.zeros(p.n_dofs)
    p.target = np.zeros(p.n_dofs)
    p.target[3] = 0.5  # target without selector
    with pytest.raises(ValidationError):
        p.__post_init__()


def test_duplicate_fixed_dof_rejected():
    p = make_problem(2, 2)
    p.dirichlet_dofs = np.array([0, 0])
    p.dirichlet_values = np.zeros(2)
    with pytest.raises(ValidationError):
        p.__post_init__()


# --- solves --------------------------------------------------------------


def test_global_stiffness_symmetric():
    rng = np.random.default_rng(0)
    p = stretch_problem()
    k = assemble_global(p, random_feasible_values(p.n_elems, rng)).toarray()
    assert np.abs(k - k.T).max() < 1e-12


def test_uniform_stretch_patch():
    """Homogeneous field under pure x stretch: linear u_x, uniform strain."""
    p = make_problem(3, 2)
    dofs, vals = [], []
    for j in range(3):
        dofs.append(p.dof(0, j, "x"))
        vals.append(0.0)
        dofs.append(p.dof(3, j, "x"))
        vals.append(0.3)
        dofs.append(p.dof(0, j, "y"))
        vals.append(0.0)
        dofs.append(p.dof(3, j, "y"))
        vals.append(0.0)
    p.dirichlet_dofs = np.array(dofs)
    p.dirichlet_values = np.array(vals)
    p.selector = np.zeros(p.n_dofs)
    p.target = np.zeros(p.n_dofs)
    p.__post_init__()
    values = np.tile([1.0, 0.0, 1.0, 0.4], (p.n_elems, 1))  # uncoupled axes
    u = assemble_and_solve(p, field_from_values(values))
    for i in range(4):
        for j in range(3):
            assert u[p.dof(i, j, "x")] == pytest.approx(0.1 * i, abs=1e-12)
            assert u[p.dof(i, j, "y")] == pytest.approx(0.0, abs=1e-12)


def test_scaling_invariance_under_prescribed_displacement():
    """No applied forces: scaling every element stiffness leaves u unchanged."""
    rng = np.random.default_rng(1)
    p = stretch_problem()
    values = random_feasible_values(p.n_elems, rng)
    u1 = assemble_and_solve(p, field_from_values(values))
    u2 = assemble_and_solve(p, field_from_values(7.3 * values))
    assert np.abs(u1 - u2).max() < 1e-10


def test_objective_identities():
    p = stretch_problem()
    u = p.target.copy()  # exact hit on the selector support
    f, rrmse = objective_and_rrmse(u, p)
    assert f == pytest.approx(0.0, abs=1e-24)
    assert rrmse == pytest.approx(0.0, abs=1e-12)
    f0, rrmse0 = objective_and_rrmse(np.zeros(p.n_dofs), p)
    assert rrmse0 == pytest.approx(1.0)
    assert f0 == pytest.approx(np.linalg.norm(p.target) ** 2)


def test_zero_target_rejected():
    p = make_problem(2, 2)
    with pytest.raises(ValidationError):
        objective_and_rrmse(np.zeros(p.n_dofs), p)


@pytest.mark.parametrize("shape", [(3, 3), (4, 4)])
def test_adjoint_matches_central_differences(shape):
    rng = np.random.default_rng(42)
    p = stretch_problem(*shape)
    values = random_feasible_values(p.n_elems, rng)
    field = field_from_values(values)
    u = assemble_and_solve(p, field)
    sens = adjoint_sensitivities(u, p, field)
    h = 1e-6
    for e in (0, p.n_elems // 2, p.n_elems - 1):
        for k in range(4):
            up = values.copy()
            up[e, k] += h
            dn = values.copy()
            dn[e, k] -= h
            f_up, _ = objective_and_rrmse(assemble_and_solve(p, field_from_values(up)), p)
            f_dn, _ = objective_and_rrmse(assemble_and_solve(p, field_from_values(dn)), p)
            fd = (f_up - f_dn) / (2 * h)
            scale = max(abs(fd), abs(sens[e, k]), 1e-12)
            assert abs(fd - sens[e, k]) / scale < 1e-4


def test_adjoint_rejects_stale_displacement():
    rng = np.random.default_rng(2)
    p = stretch_problem()
    field = field_from_values(random_feasible_values(p.n_elems, rng))
    u = assemble_and_solve(p, field)
    with pytest.raises(ValidationError):
        adjoint_sensitivities(u + 1e-3, p, field)


# --- constraint aggregation ---------------------------------------------


def test_aggregate_constraint_limits():
    g_deep, _ = aggregate_constraint(np.full(8, 5.0), beta=10.0)
    assert g_deep == pytest.approx(0.0, abs=1e-12)
    g_out, _ = aggregate_constraint(np.full(8, -5.0), beta=10.0)
    assert g_out == pytest.approx(1.0, abs=1e-12)
    g_edge, _ = aggregate_constraint(np.zeros(8), beta=10.0)
    assert g_edge == pytest.approx(0.5)


def test_aggregate_constraint_gradient():
    rng = np.random.default_rng(9)
    phis = rng.normal(scale=0.2, size=12)
    g, dg = aggregate_constraint(phis, beta=10.0)
    h = 1e-7
    for e in range(12):
        up = phis.copy()
        up[e] += h
        dn = phis.copy()
        dn[e] -= h
        fd = (aggregate_constraint(up, 10.0)[0] - aggregate_constraint(dn, 10.0)[0]) / (2 * h)
        assert fd == pytest.approx(dg[e], rel=1e-5, abs=1e-12)


def test_aggregate_constraint_rejects_bad_beta():
    with pytest.raises(ValidationError):
        aggregate_constraint(np.zeros(3), beta=0.0)


# --- the optimization loop ----------------------------------------------


@pytest.fixture(scope="module")
def synthetic_sdf():
    """Distance field over a synthetic, well-filled property cloud."""
    rng = np.random.default_rng(77)
    pts = random_feasible_values(600, rng)
    return build_sdf(pts, resolution=8)


def test_database_mode_reaches_achievable_target(synthetic_sdf):
    """A target produced by a feasible interior field must be (nearly) hit."""
    rng = np.random.default_rng(5)
    p = stretch_problem(3, 2)
    secret = synthetic_sdf.centroid + 0.05 * rng.normal(size=(p.n_elems, 4)) * (
        synthetic_sdf.bounds[:, 1] - synthetic_sdf.bounds[:, 0]
    )
    u_secret = assemble_and_solve(p, PropertyField(secret, synthetic_sdf.bounds))
    p.target = p.selector * u_secret
    p.__post_init__()
    field, hist = optimize_properties(p, synthetic_sdf, OptimConfig(max_iters=120))
    assert hist.objective[-1] < 0.25 * hist.objective[0]
    phis, _ = synthetic_sdf.query_many(field.values)
    assert phis.min() >= -1e-3


def test_history_records_every_iteration(synthetic_sdf):
    p = stretch_problem(2, 2)
    field, hist = optimize_properties(p, synthetic_sdf, OptimConfig(max_iters=15))
    assert 0 < len(hist) <= 15
    assert len(hist.objective) == len(hist.rrmse) == len(hist.constraint) == len(hist.max_move)


def test_mode_mismatch_rejected(synthetic_sdf):
    p = stretch_problem(2, 2)
    with pytest.raises(ValidationError):
        optimize_properties(p, synthetic_sdf, OptimConfig(mode="family"))


# --- persistence ---------------------------------------------------------


def test_problem_file_roundtrip(tmp_path):
    p = stretch_problem(4, 3)
    path = tmp_path / "case.problem"
    save_problem(p, path, mode="database")
    loaded, meta = load_problem(path)
    assert meta["mode"] == "database"
    assert loaded.n_cols == p.n_cols and loaded.n_rows == p.n_rows
    assert np.array_equal(loaded.dirichlet_dofs, p.dirichlet_dofs)
    assert np.array_equal(loaded.dirichlet_values, p.dirichlet_values)
    assert np.array_equal(loaded.target, p.target)
    assert np.array_equal(loaded.selector, p.selector)


def test_problem_file_rejects_unknown_directive(tmp_path):
    path = tmp_path / "bad.problem"
    path.write_text("mesh 2 2\nwobble 3\n")
    with pytest.raises(FileFormatError):
        load_problem(path)


def test_problem_file_requires_mesh_first(tmp_path):
    path = tmp_path / "bad.problem"
    path.write_text("fix 0 x 0.0\nmesh 2 2\n")
    with pytest.raises(FileFormatError):
        load_problem(path)


def test_field_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    field = field_from_values(random_feasible_values(6, rng))
    path = tmp_path / "field.csv"
    field.save_csv(path)
    again = load_field_csv(path, field.bounds)
    assert np.array_equal(again.values, field.values)


def test_field_csv_rejects_gap_in_ids(tmp_path):
    path = tmp_path / "field.csv"
    path.write_text("element,c11,c12,c22,c33\n0,1,0.2,1,0.4\n2,1,0.2,1,0.4\n")
    with pytest.raises(FileFormatError):
        load_field_csv(path, np.array([[0.0, 2.0]] * 4))


def test_history_csv_is_stable(tmp_path):
    h = OptimHistory()
    h.append(1.5, 0.3, 0.01, 0.2)
    h.append(0.7, 0.2, -0.02, 0.1)
    path = tmp_path / "hist.csv"
    h.save_csv(path)
    first = path.read_bytes()
    h.save_csv(path)
    assert path.read_bytes() == first
    assert first.decode().splitlines()[0] == "iter,objective,rrmse,constraint,max_move"


def test_property_field_bounds_enforced():
    with pytest.raises(ValidationError):
        PropertyField(values=np.full((2, 4), 5.0), bounds=np.array([[0.0, 1.0]] * 4))


def test_sdf_query_matches_batched(synthetic_sdf):
    rng = np.random.default_rng(12)
    span = synthetic_sdf.bounds[:, 1] - synthetic_sdf.bounds[:, 0]
    comps = synthetic_sdf.centroid + 0.05 * span * rng.uniform(-1, 1, size=(5, 4))
    phis, grads = synthetic_sdf.query_many(comps)
    for i in range(5):
        phi_i, grad_i = synthetic_sdf.query(comps[i])
        assert phi_i == pytest.approx(phis[i], abs=1e-12)
        assert grad_i == pytest.approx(grads[i], abs=1e-12)
