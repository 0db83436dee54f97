"""Latent-space analytics: PCA, semantic arrows, traversal, retrieval."""

import numpy as np
import pytest

from metacell.errors import EmptySelection, NoFeasibleCandidate, ValidationError
from metacell.homogenization import StiffnessComponents
from metacell.latentops import (
    PcaModel,
    SemanticArrow,
    diverse_candidates,
    fit_pca,
    interpolate,
    property_mse,
    semantic_arrow,
    traverse,
)
from metacell.microstructure import Microstructure
from metacell.pipeline import Database


def comps(c11, c12=None, c22=None, c33=None) -> StiffnessComponents:
    return StiffnessComponents(
        c11=c11,
        c12=0.3 * c11 if c12 is None else c12,
        c22=c11 if c22 is None else c22,
        c33=0.3 * c11 if c33 is None else c33,
    )


def populated_db(n=40, latent_dim=3, seed=0) -> Database:
    """Records whose first latent coordinate tracks c11."""
    rng = np.random.default_rng(seed)
    db = Database(grid_shape=(4, 4), latent_dim=latent_dim)
    for i in range(n):
        cells = np.zeros((4, 4), dtype=np.uint8)
        cells[i % 4, :] = 1
        cells[:, i % 4] = 1
        c11 = 0.1 + 0.8 * i / (n - 1)
        z = np.concatenate([[c11 * 10.0], rng.normal(0, 0.01, latent_dim - 1)])
        db.add(Microstructure(cells=cells), comps(c11), latent=z)
    return db


# --- pca -----------------------------------------------------------------


def test_pca_components_orthonormal():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(60, 5)) * np.array([5.0, 2.0, 1.0, 0.5, 0.1])
    pca = fit_pca(z, 3)
    gram = pca.components @ pca.components.T
    assert np.allclose(gram, np.eye(3), atol=1e-12)


def test_pca_variance_ratio_descends_and_bounded():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(80, 6))
    pca = fit_pca(z, 4)
    r = pca.explained_variance_ratio
    assert (np.diff(r) <= 1e-15).all()
    assert 0 < r.sum() <= 1.0 + 1e-12


def test_pca_identifies_dominant_axis():
    rng = np.random.default_rng(3)
    t = rng.normal(size=200)
    z = np.zeros((200, 4))
    z[:, 2] = 10.0 * t
    z += rng.normal(0, 0.01, size=z.shape)
    pca = fit_pca(z, 1)
    assert abs(pca.components[0, 2]) > 0.999


def test_pca_project_reconstruct_roundtrip():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(30, 3))
    pca = fit_pca(z, 3)
    back = pca.reconstruct(pca.project(z))
    assert np.allclose(back, z, atol=1e-10)


def test_pca_sign_pinned():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(50, 4))
    a = fit_pca(z, 2)
    b = fit_pca(z[::-1].copy(), 2)
    # row order of the data must not flip component signs
    assert np.allclose(np.abs(a.components), np.abs(b.components), atol=1e-9)
    for row_a, row_b in zip(a.components, b.components):
        assert row_a[np.abs(row_a).argmax()] > 0
        assert row_b[np.abs(row_b).argmax()] > 0


def test_pca_rank_deficient_truncates_with_warning():
    z = np.zeros((10, 4))
    z[:, 0] = np.arange(10.0)
    with pytest.warns(UserWarning, match="rank"):
        pca = fit_pca(z, 3)
    assert pca.components.shape[0] == 1


def test_pca_validation():
    with pytest.raises(ValidationError):
        fit_pca(np.zeros((5, 3)), 0)
    with pytest.raises(ValidationError):
        fit_pca(np.zeros((2, 3)), 3)


# --- arrows --------------------------------------------------------------


def test_arrow_is_unit_and_points_up_the_score():
    db = populated_db()
    arrow = semantic_arrow(db, lambda r: r.props.c11, criterion="c11")
    assert np.linalg.norm(arrow.direction) == pytest.approx(1.0)
    # first latent coordinate tracks c11 by construction
    assert arrow.direction[0] > 0.99
    assert arrow.criterion == "c11"
    assert arrow.low_count > 0 and arrow.high_count > 0


def test_arrow_quantile_counts():
    db = populated_db(n=40)
    arrow = semantic_arrow(db, lambda r: r.props.c11, q=0.25)
    assert arrow.low_count == 10
    assert arrow.high_count == 10


def test_arrow_ratio_mode_splits_on_threshold():
    db = Database(grid_shape=(4, 4), latent_dim=2)
    cells = np.ones((4, 4), dtype=np.uint8)
    for i, ratio in enumerate([0.2, 0.3, 3.0, 4.0, 1.0]):
        db.add(
            Microstructure(cells=cells) if i == 0 else Microstructure(cells=np.roll(cells, i, 0)),
            comps(0.5, c22=0.5 / ratio),
            latent=np.array([float(i), 0.0]),
        )
    arrow = semantic_arrow(
        db, lambda r: r.props.c11 / r.props.c22, mode="ratio", ratio_threshold=2.0
    )
    assert arrow.low_count == 2  # ratios 0.2, 0.3
    assert arrow.high_count == 2  # ratios 3.0, 4.0


def test_arrow_rejects_bad_parameters():
    db = populated_db(n=10)
    with pytest.raises(ValidationError):
        semantic_arrow(db, lambda r: r.props.c11, q=0.7)
    with pytest.raises(ValidationError):
        semantic_arrow(db, lambda r: r.props.c11, mode="ratio", ratio_threshold=0.9)
    with pytest.raises(ValidationError):
        semantic_arrow(db, lambda r: r.props.c11, mode="sideways")


def test_arrow_empty_selection_paths():
    db = Database(grid_shape=(4, 4), latent_dim=2)
    with pytest.raises(EmptySelection):
        semantic_arrow(db, lambda r: r.props.c11)
    cells = np.ones((4, 4), dtype=np.uint8)
    db.add(Microstructure(cells=cells), comps(0.5), latent=np.zeros(2))
    # all scores sit between the ratio cuts: both clusters empty
    with pytest.raises(EmptySelection):
        semantic_arrow(db, lambda r: 1.0, mode="ratio", ratio_threshold=2.0)


def test_arrow_direction_validation():
    with pytest.raises(ValidationError):
        SemanticArrow(direction=np.array([1.0, 1.0]), criterion="x", low_count=1, high_count=1)


# --- traversal and interpolation ----------------------------------------


class StubDecoder:
    """Decode = latent painted into the first row, as densities."""

    def __init__(self, shape=(4, 4)):
        self.shape = shape
        self.calls = []

    def decode(self, z):
        self.calls.append(np.asarray(z).copy())
        d = np.zeros(self.shape)
        d[0, : len(z)] = np.clip(np.asarray(z), 0.0, 1.0)
        return d


def test_traverse_visits_symmetric_steps():
    model = StubDecoder()
    arrow = SemanticArrow(
        direction=np.array([1.0, 0.0]), criterion="c11", low_count=1, high_count=1
    )
    cells = traverse(np.array([0.5, 0.5]), arrow, steps=2, step_size=0.1, model=model, cut=0.9)
    assert len(cells) == 5
    assert all(isinstance(c, Microstructure) for c in cells)
    visited = np.array(model.calls)[:, 0]
    assert np.allclose(visited, [0.3, 0.4, 0.5, 0.6, 0.7])


def test_traverse_zero_steps_is_just_the_start():
    model = StubDecoder()
    arrow = SemanticArrow(
        direction=np.array([0.0, 1.0]), criterion="c11", low_count=1, high_count=1
    )
    cells = traverse(np.zeros(2), arrow, steps=0, step_size=1.0, model=model)
    assert len(cells) == 1
    with pytest.raises(ValidationError):
        traverse(np.zeros(2), arrow, steps=-1, step_size=1.0, model=model)


def test_interpolate_endpoints_and_midpoint():
    a, b = np.array([0.0, 2.0]), np.array([4.0, 0.0])
    assert np.allclose(interpolate(a, b, 0.0), a)
    assert np.allclose(interpolate(a, b, 1.0), b)
    assert np.allclose(interpolate(a, b, 0.5), [2.0, 1.0])
    assert np.allclose(interpolate(a, b, 1.5), [6.0, -1.0])
    with pytest.raises(ValidationError):
        interpolate(a, np.zeros(3), 0.5)


def test_property_mse_zero_at_target():
    db = populated_db(n=12)
    std = db.standardizer()
    props = db.property_matrix()
    mse = property_mse(props, props[3], std)
    assert mse[3] == pytest.approx(0.0, abs=1e-15)
    assert (mse[np.arange(12) != 3] > 0).all()


# --- retrieval -----------------------------------------------------------


def test_candidates_hit_their_target():
    db = populated_db(n=40)
    target = db.get(20).props
    cand = diverse_candidates(db, target, n_clusters=5)
    assert 20 in cand.ids()
    assert len(cand.entries) <= 5
    assert cand.n_admitted > 0
    # entries are sorted by id and carry that record's data
    ids = cand.ids()
    assert ids == sorted(ids)
    for rid, props, latent in cand.entries:
        assert props.c11 == db.get(rid).props.c11
        assert np.allclose(latent, db.get(rid).latent)


def test_candidates_small_pool_returned_whole():
    db = populated_db(n=6)
    cand = diverse_candidates(db, db.get(2).props, n_clusters=10)
    assert len(cand.entries) <= 6
    assert 2 in cand.ids()


def test_candidates_far_target_tops_up_with_nearest():
    db = populated_db(n=30)
    target = comps(50.0)  # far outside the sampled cloud
    cand = diverse_candidates(db, target, n_clusters=4)
    assert cand.n_admitted == 0
    assert len(cand.entries) == 4
    # nearest records by property distance are the stiffest ones
    stiffest = {r.id for r in sorted(db.records, key=lambda r: -r.props.c11)[:4]}
    assert set(cand.ids()) == stiffest


def test_candidates_deterministic():
    db = populated_db(n=40)
    target = db.get(10).props
    a = diverse_candidates(db, target, n_clusters=5, clustering_seed=3)
    b = diverse_candidates(db, target, n_clusters=5, clustering_seed=3)
    assert a.ids() == b.ids()


def test_candidates_require_latents():
    db = Database(grid_shape=(4, 4), latent_dim=2)
    db.add(Microstructure(cells=np.ones((4, 4), dtype=np.uint8)), comps(0.5))
    with pytest.raises(NoFeasibleCandidate):
        diverse_candidates(db, comps(0.5))
