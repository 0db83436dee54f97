"""Graded families: cells morphing along a prescribed stiffness gradation.

A gradation curve maps one controlled stiffness value to a full property
tuple. Database records near the curve are ranked by the controlled value
and wired into a DAG whose edge weights are latent distances; repeatedly
extracting shortest source-to-sink paths (and deleting their interiors)
yields disjoint families, which latent interpolation then densifies.
"""

from __future__ import annotations

import heapq
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DisconnectedGraph, EmptySelection, ValidationError
from .homogenization import MaterialSpec, StiffnessComponents, homogenize
from .latentmodel import LatentModel, postprocess_density
from .latentops import interpolate
from .microstructure import Microstructure

SOURCE = -1
DEST = -2


@dataclass(frozen=True)
class GradationCurve:
    """Controlled value c in [0, c_max] to a full stiffness tuple."""

    evaluator: object  # callable c -> StiffnessComponents
    c_max: float
    delta: float = 0.05  # admission distance in standardized property units

    def __post_init__(self):
        if self.delta <= 0:
            raise ValidationError("delta must be positive")
        if self.c_max <= 0:
            raise ValidationError("c_max must be positive")

    def __call__(self, c: float) -> StiffnessComponents:
        if not 0.0 <= c <= self.c_max:
            raise ValidationError(f"controlled value {c} outside [0, {self.c_max}]")
        return self.evaluator(c)

    def sample(self, n: int = 512) -> np.ndarray:
        """(n, 4) property tuples at uniform controlled values."""
        return np.array([self(c).as_array() for c in np.linspace(0.0, self.c_max, n)])


def stiffness_matching_curve(mat: MaterialSpec = MaterialSpec(), delta: float = 0.05) -> GradationCurve:
    """Built-in gradation: C22 tracks C11, C12 blends toward the constituent
    coupling as c approaches the solid value, C33 follows a fitted cubic."""
    solid = mat.constituent()
    c11m = solid.c11
    nu = mat.poisson_ratio

    def evaluate(c: float) -> StiffnessComponents:
        c12 = ((1.0 - nu) * (1.0 - c / c11m) ** 4 + nu) * c
        c33 = 0.25 * c**3 - 0.65 * c**2 + 0.6775 * c
        return StiffnessComponents(c11=c, c12=c12, c22=c, c33=c33)

    return GradationCurve(evaluator=evaluate, c_max=c11m, delta=delta)


def select_near_curve(db, curve: GradationCurve, samples: int = 512):
    """Records within delta of the curve, ascending in the controlled value.

    Distance is the minimum Euclidean distance between the record's
    standardized properties and a uniform sampling of the curve, also
    standardized. Ties in the controlled value order by id.
    """
    std = db.standardizer()
    curve_pts = std.transform(curve.sample(samples))
    props = std.transform(db.property_matrix())
    picked = []
    for rec, p in zip(db.records, props):
        d = np.sqrt(((curve_pts - p) ** 2).sum(axis=1)).min()
        if d <= curve.delta:
            picked.append(rec)
    if not picked:
        raise EmptySelection(f"no record within {curve.delta} of the curve")
    picked.sort(key=lambda r: (r.props.c11, r.id))
    return picked


@dataclass
class FamilyGraph:
    """Rank-ascending DAG over selected records plus virtual endpoints."""

    records: list  # rank order
    adjacency: dict[int, list[tuple[int, float]]]  # node id -> [(node id, weight)]
    k: int
    n_links: int

    def neighbors(self, node: int):
        return self.adjacency.get(node, [])


def build_family_graph(selected, k: int = 5, n_links: int = 50) -> FamilyGraph:
    """Wire each record to its k latent-nearest strictly stiffer records.

    A virtual source feeds the n_links lowest-ranked records and the
    n_links highest-ranked feed a virtual sink, all at weight 0, so path
    search does not prejudge where a family starts or ends.
    """
    if len(selected) < 2:
        raise ValidationError("need at least two records to build a family graph")
    if any(r.latent is None for r in selected):
        raise ValidationError("family graph requires latent encodings")
    lat = np.array([r.latent for r in selected])
    c11 = np.array([r.props.c11 for r in selected])
    adj: dict[int, list[tuple[int, float]]] = {}
    n = len(selected)
    for i in range(n):
        # strictly greater controlled value keeps families strictly ascending
        higher = np.flatnonzero(c11 > c11[i])
        if higher.size == 0:
            continue
        d = np.linalg.norm(lat[higher] - lat[i], axis=1)
        take = higher[np.lexsort((higher, d))[:k]]
        adj[selected[i].id] = [
            (selected[j].id, float(np.linalg.norm(lat[j] - lat[i]))) for j in take
        ]
    m = min(n_links, n)
    adj[SOURCE] = [(r.id, 0.0) for r in selected[:m]]
    for r in selected[n - m :]:
        adj.setdefault(r.id, []).append((DEST, 0.0))
    return FamilyGraph(records=list(selected), adjacency=adj, k=k, n_links=n_links)


def shortest_path(graph: FamilyGraph, removed: set[int] | None = None):
    """Dijkstra from source to sink, skipping removed nodes.

    Returns (path node ids incl. endpoints, total weight) or None if the
    sink is unreachable. Ties resolve toward lexicographically smaller
    predecessor chains via the heap's secondary key.
    """
    removed = removed or set()
    dist: dict[int, float] = {SOURCE: 0.0}
    prev: dict[int, int] = {}
    heap = [(0.0, SOURCE)]
    done: set[int] = set()
    while heap:
        d, node = heapq.heappop(heap)
        if node in done or d > dist.get(node, np.inf):
            continue
        done.add(node)
        if node == DEST:
            break
        for nxt, w in graph.neighbors(node):
            if nxt in removed or nxt in done:
                continue
            nd = d + w
            if nd < dist.get(nxt, np.inf):
                dist[nxt] = nd
                prev[nxt] = node
                heapq.heappush(heap, (nd, nxt))
    if DEST not in done:
        return None
    path = [DEST]
    while path[-1] != SOURCE:
        path.append(prev[path[-1]])
    return path[::-1], dist[DEST]


@dataclass
class MetamaterialFamily:
    """Ordered morph sequence with its latent path length."""

    members: list[tuple[Microstructure, StiffnessComponents, np.ndarray]]
    path_length: float = field(default=0.0)

    def __post_init__(self):
        if not self.path_length:
            self.path_length = float(
                sum(
                    np.linalg.norm(self.members[i + 1][2] - self.members[i][2])
                    for i in range(len(self.members) - 1)
                )
            )

    def __len__(self):
        return len(self.members)

    def controlled_values(self) -> np.ndarray:
        return np.array([p.c11 for _, p, _ in self.members])


def extract_families(graph: FamilyGraph, count: int = 5) -> list[MetamaterialFamily]:
    """Repeated shortest-path extraction with interior-node deletion.

    Stops early with a warning once the sink becomes unreachable; families
    found so far are returned. Interior nodes of returned families are
    pairwise disjoint by construction.
    """
    by_id = {r.id: r for r in graph.records}
    removed: set[int] = set()
    out = []
    for _ in range(count):
        hit = shortest_path(graph, removed)
        if hit is None:
            warnings.warn(
                f"graph disconnected after {len(out)} extraction(s)", stacklevel=2
            )
            break
        path, _ = hit
        interior = path[1:-1]
        members = [(by_id[i].micro, by_id[i].props, np.asarray(by_id[i].latent)) for i in interior]
        out.append(MetamaterialFamily(members=members))
        removed.update(interior)
    if not out:
        raise DisconnectedGraph("no source-to-sink path exists")
    return out


def densify_family(
    fam: MetamaterialFamily,
    samples_per_edge: int,
    model: LatentModel,
    material: MaterialSpec = MaterialSpec(),
    cut: float = 0.9,
) -> MetamaterialFamily:
    """Insert decoded cells at uniform latent points between neighbors.

    Each insertion decodes the interpolated code, postprocesses it into an
    admissible-leaning cell and homogenizes it; its stored latent is the
    interpolation point. Member order follows the path; the controlled
    value of inserted members is measured, not inherited, so small local
    non-monotonicity is possible and deliberate.
    """
    if samples_per_edge < 0:
        raise ValidationError("samples_per_edge must be non-negative")
    if samples_per_edge == 0 or len(fam.members) < 2:
        return MetamaterialFamily(members=list(fam.members), path_length=fam.path_length)
    members = []
    for a, b in zip(fam.members[:-1], fam.members[1:]):
        members.append(a)
        for s in range(1, samples_per_edge + 1):
            t = s / (samples_per_edge + 1)
            z = interpolate(a[2], b[2], t)
            micro = postprocess_density(model.decode(z), cut)
            if micro.cells.sum() == 0:
                continue  # decoded to nothing; skip the insertion
            members.append((micro, homogenize(micro, material), z))
    members.append(fam.members[-1])
    return MetamaterialFamily(members=members)
