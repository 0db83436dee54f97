"""Analytics in the latent code space.

Everything here treats the trained model as a black box decoder/encoder:
principal axes of the code cloud, unit directions that realize a property
change (difference of cluster means), straight-line traversals and
interpolation, and diverse candidate retrieval for a property target.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans

from .errors import EmptySelection, NoFeasibleCandidate, ValidationError
from .homogenization import StiffnessComponents
from .latentmodel import LatentModel, postprocess_density
from .microstructure import Microstructure


@dataclass(frozen=True)
class PcaModel:
    """Orthonormal principal axes of centered latent data."""

    components: np.ndarray  # (k, J), rows orthonormal
    explained_variance_ratio: np.ndarray  # (k,), descending
    mean: np.ndarray  # (J,)

    def project(self, latents: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(latents, dtype=float)) - self.mean
        return z @ self.components.T

    def reconstruct(self, scores: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(scores, dtype=float))
        return s @ self.components + self.mean


@dataclass(frozen=True)
class SemanticArrow:
    """Unit latent direction from a low-scoring to a high-scoring cluster."""

    direction: np.ndarray
    criterion: str
    low_count: int
    high_count: int

    def __post_init__(self):
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-12:
            raise ValidationError("arrow direction must be unit length")


@dataclass(frozen=True)
class CandidateSet:
    """Property-matched, latent-diverse retrieval result."""

    target: StiffnessComponents
    entries: list[tuple[int, StiffnessComponents, np.ndarray]]  # (id, props, latent)
    n_admitted: int = 0  # pool members that met the strict admission radius

    def ids(self) -> list[int]:
        return [e[0] for e in self.entries]


def fit_pca(latents: np.ndarray, n_components: int = 2) -> PcaModel:
    """PCA via SVD of the centered data matrix.

    Component signs are pinned by making the largest-magnitude loading of
    each axis positive, so reruns and library changes cannot flip plots.
    If the data has lower rank than requested the result is truncated with
    a warning.
    """
    z = np.atleast_2d(np.asarray(latents, dtype=float))
    n, j = z.shape
    if n_components < 1:
        raise ValidationError("n_components must be positive")
    if n < n_components:
        raise ValidationError(f"need at least {n_components} samples, got {n}")
    mean = z.mean(axis=0)
    centered = z - mean
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int((s > max(s[0], 1e-300) * 1e-10).sum())
    k = min(n_components, rank)
    if k < n_components:
        warnings.warn(
            f"latent data has rank {rank}; returning {k} of {n_components} components",
            stacklevel=2,
        )
    comps = vt[:k]
    flip = np.sign(comps[np.arange(k), np.abs(comps).argmax(axis=1)])
    comps = comps * flip[:, None]
    var = s**2 / max(n - 1, 1)
    total = var.sum()
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    return PcaModel(components=comps, explained_variance_ratio=ratio, mean=mean)


def semantic_arrow(
    db,
    score,
    mode: str = "quantile",
    q: float = 0.30,
    ratio_threshold: float = 2.0,
    criterion: str = "",
) -> SemanticArrow:
    """Direction from the mean latent of low scorers to that of high scorers.

    quantile mode: high set = top q fraction by score, low set = bottom q.
    ratio mode: high set = score > threshold, low set = score < 1/threshold
    (natural for ratio-valued scores like C11/C22).
    """
    recs = [r for r in db.records if r.latent is not None]
    if not recs:
        raise EmptySelection("database has no latent encodings")
    scores = np.array([float(score(r)) for r in recs])
    if mode == "quantile":
        if not 0 < q < 0.5:
            raise ValidationError("quantile fraction must lie in (0, 0.5)")
        lo_cut = np.quantile(scores, q)
        hi_cut = np.quantile(scores, 1.0 - q)
        low = [r for r, s in zip(recs, scores) if s <= lo_cut]
        high = [r for r, s in zip(recs, scores) if s >= hi_cut]
    elif mode == "ratio":
        if ratio_threshold <= 1.0:
            raise ValidationError("ratio threshold must exceed 1")
        low = [r for r, s in zip(recs, scores) if s < 1.0 / ratio_threshold]
        high = [r for r, s in zip(recs, scores) if s > ratio_threshold]
    else:
        raise ValidationError(f"unknown mode {mode!r}")
    if not low or not high:
        raise EmptySelection(
            f"arrow selection empty (low={len(low)}, high={len(high)}) for mode {mode!r}"
        )
    d = np.mean([r.latent for r in high], axis=0) - np.mean([r.latent for r in low], axis=0)
    norm = np.linalg.norm(d)
    if norm == 0:
        raise EmptySelection("cluster means coincide; arrow undefined")
    return SemanticArrow(
        direction=d / norm, criterion=criterion or mode, low_count=len(low), high_count=len(high)
    )


def traverse(
    z0: np.ndarray,
    arrow: SemanticArrow,
    steps: int,
    step_size: float,
    model: LatentModel,
    cut: float = 0.9,
) -> list[Microstructure]:
    """Decode along z0 + i*step_size*direction for i = -steps..steps."""
    if steps < 0:
        raise ValidationError("steps must be non-negative")
    z0 = np.asarray(z0, dtype=float)
    out = []
    for i in range(-steps, steps + 1):
        z = z0 + i * step_size * arrow.direction
        out.append(postprocess_density(model.decode(z), cut))
    return out


def interpolate(z_a: np.ndarray, z_b: np.ndarray, t: float) -> np.ndarray:
    """Affine combination (1-t)*z_a + t*z_b; t outside [0,1] extrapolates."""
    z_a = np.asarray(z_a, dtype=float)
    z_b = np.asarray(z_b, dtype=float)
    if z_a.shape != z_b.shape:
        raise ValidationError("latent shapes differ")
    return (1.0 - t) * z_a + t * z_b


def property_mse(props: np.ndarray, target: np.ndarray, standardizer) -> np.ndarray:
    """Mean squared error over the four standardized components."""
    p = standardizer.transform(props)
    t = standardizer.transform(target)
    return np.mean((np.atleast_2d(p) - t) ** 2, axis=1)


def diverse_candidates(
    db,
    target: StiffnessComponents,
    n_clusters: int = 10,
    admission_mse: float = 0.01,
    pool_cap: int = 200,
    clustering_seed: int = 0,
) -> CandidateSet:
    """Property-admissible records, spread out in latent space.

    Admissible records (standardized-component MSE vs the target at most
    admission_mse, nearest pool_cap kept) are clustered by k-means on their
    first two principal latent scores; each cluster contributes its best
    property match (ties to the lower id). A pool smaller than n_clusters
    is returned whole.

    Targets near the edge of the sampled property cloud can leave the
    strict radius empty; the pool is then topped up with the nearest
    records so every element still gets candidates, and n_admitted on the
    result says how many met the radius.
    """
    recs = [r for r in db.records if r.latent is not None]
    if not recs:
        raise NoFeasibleCandidate("database has no latent encodings")
    props = np.array([r.props.as_array() for r in recs])
    mse = property_mse(props, target.as_array(), db.standardizer())
    order = np.argsort(mse, kind="stable")
    admitted = [i for i in order if mse[i] <= admission_mse][:pool_cap]
    n_admitted = len(admitted)
    if n_admitted < n_clusters:
        admitted = list(order[: max(n_clusters, n_admitted)])
    pool = [recs[i] for i in admitted]
    pool_mse = mse[admitted]
    if len(pool) <= n_clusters:
        entries = [(r.id, r.props, np.asarray(r.latent)) for r in pool]
        entries.sort(key=lambda e: e[0])
        return CandidateSet(target=target, entries=entries, n_admitted=n_admitted)
    scores = fit_pca(np.array([r.latent for r in pool]), 2).project(
        np.array([r.latent for r in pool])
    )
    km = KMeans(
        n_clusters=n_clusters,
        init="k-means++",
        n_init=10,
        max_iter=100,
        random_state=clustering_seed,
    ).fit(scores)
    entries = []
    for c in range(n_clusters):
        members = np.flatnonzero(km.labels_ == c)
        if members.size == 0:
            continue
        # lowest MSE wins, then lowest database id
        best = min(members, key=lambda i: (pool_mse[i], pool[i].id))
        r = pool[best]
        entries.append((r.id, r.props, np.asarray(r.latent)))
    entries.sort(key=lambda e: e[0])
    return CandidateSet(target=target, entries=entries, n_admitted=n_admitted)
