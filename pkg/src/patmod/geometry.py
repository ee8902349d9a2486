"""Non-learned point-cloud machinery.

Point clouds are plain (n, 3) float64 arrays in object-centered coordinates.
Everything here is a pure function of its inputs; the differentiable pieces
(Chamfer) accept DTensors and record onto whatever tape they live on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import DTensor
from .errors import ContractError, DomainError

logger = logging.getLogger(__name__)

# relative slack when collecting nearest-neighbor tie candidates; covers the
# ulp-level disagreement between the KD-tree's distances and numpy's
_TIE_SLACK = 1e-12


@dataclass(frozen=True)
class AABB:
    """Axis-aligned box given by per-axis lower/upper corners."""

    lo: np.ndarray
    hi: np.ndarray

    @property
    def sides(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def max_side(self) -> float:
        return float(self.sides.max())

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.lo) & (points <= self.hi), axis=1)

    def union(self, other: "AABB") -> "AABB":
        return AABB(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))


@dataclass
class Region:
    """One voxel cell of a split cloud, padded to fixed capacity."""

    points: np.ndarray  # (R, 3), real points first, zero rows after
    mask: np.ndarray  # (R,) bool, True on real rows
    center: np.ndarray  # (3,), mean of real points, zeros when empty
    voxel_index: tuple[int, int, int]
    source_rows: np.ndarray  # indices into the source cloud, len == real count

    @property
    def real_count(self) -> int:
        return int(self.mask.sum())

    @property
    def real_points(self) -> np.ndarray:
        return self.points[: self.real_count]

    @property
    def is_empty(self) -> bool:
        return self.real_count == 0


@dataclass
class RegionSet:
    regions: list[Region]
    capacity: int
    m_per_edge: int
    box: AABB

    def __len__(self) -> int:
        return len(self.regions)


@dataclass
class VoxelGrid:
    resolution: int
    occupancy: np.ndarray  # (res, res, res) bool
    bounds: AABB


def as_cloud(points) -> np.ndarray:
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise DomainError(f"point cloud must be (n, 3), got {cloud.shape}")
    return cloud


def bounding_box(cloud: np.ndarray, epsilon: float = 0.0) -> AABB:
    """Min/max corners per axis, upper corner pushed out by epsilon.

    The expansion keeps max-coordinate points strictly inside the last voxel
    when the box is later split into cells.
    """
    cloud = as_cloud(cloud)
    if cloud.shape[0] == 0:
        raise DomainError("bounding box of an empty cloud")
    lo = cloud.min(axis=0)
    hi = cloud.max(axis=0) + epsilon
    return AABB(lo, hi)


def _cube_edge(m_regions: int) -> int:
    edge = round(m_regions ** (1.0 / 3.0))
    if edge**3 != m_regions or m_regions < 1:
        raise DomainError(f"region count must be a perfect cube, got {m_regions}")
    return edge


def voxel_assign(points: np.ndarray, box: AABB, m_per_edge: int) -> np.ndarray:
    """Flat voxel id per point; points outside the box clamp to boundary cells."""
    cell = box.sides / m_per_edge
    cell = np.where(cell > 0.0, cell, 1.0)  # degenerate axes collapse to cell 0
    ijk = np.floor((points - box.lo) / cell).astype(np.intp)
    ijk = np.clip(ijk, 0, m_per_edge - 1)
    return (ijk[:, 0] * m_per_edge + ijk[:, 1]) * m_per_edge + ijk[:, 2]


def split_regions(
    source: np.ndarray,
    reference: np.ndarray,
    m_regions: int,
    capacity: int,
) -> RegionSet:
    """Partition source points into the voxels of the reference bounding box.

    Each region is padded with zero rows to ``capacity``; real points always
    occupy the leading rows so the padded-index removal rule stays positional.
    Overflowing regions keep their lowest-index points and log a warning.
    """
    source = as_cloud(source)
    reference = as_cloud(reference)
    if reference.shape[0] == 0:
        raise DomainError("reference cloud for region splitting is empty")
    m_edge = _cube_edge(m_regions)
    box = bounding_box(reference, epsilon=_split_epsilon(reference))
    flat = voxel_assign(source, box, m_edge)

    regions = []
    for m in range(m_regions):
        rows = np.flatnonzero(flat == m)
        if rows.size > capacity:
            logger.warning(
                "region %d overflows capacity (%d > %d); keeping lowest-index points",
                m,
                rows.size,
                capacity,
            )
            rows = rows[:capacity]
        real = source[rows]
        points = np.zeros((capacity, 3))
        points[: rows.size] = real
        mask = np.zeros(capacity, dtype=bool)
        mask[: rows.size] = True
        center = real.mean(axis=0) if rows.size else np.zeros(3)
        i, rem = divmod(m, m_edge * m_edge)
        j, k = divmod(rem, m_edge)
        regions.append(Region(points, mask, center, (i, j, k), rows))
    return RegionSet(regions, capacity, m_edge, box)


def _split_epsilon(reference: np.ndarray) -> float:
    box = bounding_box(reference)
    side = box.max_side
    return 1e-6 * side if side > 0.0 else 1e-12


def center_region(region: Region) -> Region:
    """Translate real points so their mean sits at the origin (padded rows stay zero)."""
    if region.is_empty:
        return replace(region, center=np.zeros(3))
    points = region.points.copy()
    points[region.mask] -= region.center
    return replace(region, points=points)


def decenter(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Translate points back to the object frame; inverse of center_region on real rows."""
    return np.asarray(points, dtype=np.float64) + np.asarray(center, dtype=np.float64)


def grid_lattice(count: int, extent: float, mode: str = "voxel") -> np.ndarray:
    """Regular lattice of ``count`` points: a 3-D grid, or an n x n sheet at z=0."""
    if count <= 0:
        raise DomainError(f"lattice point count must be positive, got {count}")
    if mode == "voxel":
        nx, ny, nz = _lattice_factors(count)
        axes = [_axis_coords(n, extent) for n in (nx, ny, nz)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.reshape(-1) for g in grid], axis=1)
    if mode == "plane":
        n = round(count**0.5)
        if n * n != count:
            raise DomainError(f"plane mode needs a square point count, got {count}")
        axes = [_axis_coords(n, extent)] * 2
        gx, gy = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.reshape(-1), gy.reshape(-1), np.zeros(count)], axis=1)
    raise ContractError(f"unknown lattice mode {mode!r}")


def _axis_coords(n: int, extent: float) -> np.ndarray:
    return np.linspace(-extent, extent, n) if n > 1 else np.zeros(1)


def _lattice_factors(count: int) -> tuple[int, int, int]:
    # minimize the max/min factor ratio; ties resolve to the lexicographically
    # largest triple so 256 fixes to (8, 8, 4)
    best = None
    for a in range(1, count + 1):
        if count % a:
            continue
        rest = count // a
        for b in range(1, rest + 1):
            if rest % b:
                continue
            c = rest // b
            ratio = max(a, b, c) / min(a, b, c)
            key = (-ratio, a, b, c)
            if best is None or key > best:
                best = key
    assert best is not None
    return best[1], best[2], best[3]


def nearest_neighbor(queries: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact Euclidean nearest neighbor per query via KD-tree.

    Distances are recomputed in numpy so they match a brute-force double loop
    bitwise, and equidistant targets resolve to the lowest index.
    """
    queries = as_cloud(queries)
    targets = as_cloud(targets)
    if targets.shape[0] == 0:
        raise DomainError("nearest neighbor against an empty target cloud")
    tree = cKDTree(targets)
    dist, _ = tree.query(queries)
    radii = dist * (1.0 + _TIE_SLACK)
    candidates = tree.query_ball_point(queries, radii)
    indices = np.empty(queries.shape[0], dtype=np.intp)
    distances = np.empty(queries.shape[0])
    for qi, cand in enumerate(candidates):
        cand = np.sort(np.asarray(cand, dtype=np.intp))
        diffs = targets[cand] - queries[qi]
        d = np.sqrt((diffs * diffs).sum(axis=1))
        best = d.min()
        pick = np.flatnonzero(d == best)[0]
        indices[qi] = cand[pick]
        distances[qi] = best
    return indices, distances


def chamfer(a, b, require_grad: bool = True):
    """Symmetric sum of nearest-neighbor Euclidean distances (raw training form).

    Differentiable through both point sets: each term pairs points by the
    argmin found with the KD-tree, then measures the paired distances on the
    tape.  Accepts DTensors or arrays; returns a scalar DTensor.
    """
    at = a if isinstance(a, DTensor) else ad.constant(as_cloud(a))
    bt = b if isinstance(b, DTensor) else ad.constant(as_cloud(b))
    a_np, b_np = at.data, bt.data
    if a_np.shape[0] == 0 or b_np.shape[0] == 0:
        raise DomainError("chamfer distance of an empty cloud")
    idx_a_for_b, _ = nearest_neighbor(b_np, a_np)  # nearest a for every b
    idx_b_for_a, _ = nearest_neighbor(a_np, b_np)  # nearest b for every a
    term_b = ad.reduce_sum(ad.row_norm(ad.sub(ad.gather_rows(at, idx_a_for_b), bt)))
    term_a = ad.reduce_sum(ad.row_norm(ad.sub(ad.gather_rows(bt, idx_b_for_a), at)))
    return ad.add(term_b, term_a)


def chamfer_brute_force(a: np.ndarray, b: np.ndarray) -> float:
    """O(n*m) oracle for the raw-sum Chamfer distance."""
    a, b = as_cloud(a), as_cloud(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DomainError("chamfer distance of an empty cloud")
    diff = a[:, None, :] - b[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    return float(d.min(axis=0).sum() + d.min(axis=1).sum())


def chamfer_eval(a: np.ndarray, b: np.ndarray) -> float:
    """Per-point-normalized Chamfer used for reporting.

    Average of the two directional means, i.e. ((1/|A|) sum + (1/|B|) sum) / 2,
    so values stay comparable across cloud cardinalities.
    """
    a, b = as_cloud(a), as_cloud(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise DomainError("chamfer distance of an empty cloud")
    _, d_ab = nearest_neighbor(a, b)
    _, d_ba = nearest_neighbor(b, a)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def voxelize(cloud: np.ndarray, resolution: int, bounds: AABB) -> VoxelGrid:
    """Occupancy grid: a cell is on iff at least one point falls inside it."""
    cloud = as_cloud(cloud)
    if resolution < 1:
        raise DomainError(f"voxel resolution must be >= 1, got {resolution}")
    cell = bounds.sides / resolution
    cell = np.where(cell > 0.0, cell, 1.0)
    ijk = np.floor((cloud - bounds.lo) / cell).astype(np.intp)
    ijk = np.clip(ijk, 0, resolution - 1)
    occ = np.zeros((resolution,) * 3, dtype=bool)
    occ[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = True
    return VoxelGrid(resolution, occ, bounds)


def iou(a: VoxelGrid, b: VoxelGrid) -> float:
    """Intersection over union of two occupancy grids on identical bounds."""
    if a.resolution != b.resolution:
        raise ContractError(f"grid resolutions differ: {a.resolution} vs {b.resolution}")
    if not (np.array_equal(a.bounds.lo, b.bounds.lo) and np.array_equal(a.bounds.hi, b.bounds.hi)):
        raise ContractError("grid bounds differ; voxelize both clouds on shared bounds")
    union = np.logical_or(a.occupancy, b.occupancy).sum()
    if union == 0:
        raise DomainError("IoU of two empty grids")
    inter = np.logical_and(a.occupancy, b.occupancy).sum()
    return float(inter) / float(union)


def downsample(cloud: np.ndarray, k: int, method: str = "fps", seed: int | None = None) -> np.ndarray:
    """Pick k points: deterministic farthest-point sampling or a seeded draw."""
    cloud = as_cloud(cloud)
    n = cloud.shape[0]
    if k > n:
        raise DomainError(f"cannot downsample {n} points to {k}")
    if k == n:
        return cloud.copy()
    if method == "fps":
        return cloud[farthest_point_indices(cloud, k)]
    if method == "random":
        rng = np.random.default_rng(seed)
        return cloud[rng.choice(n, size=k, replace=False)]
    raise ContractError(f"unknown downsample method {method!r}")


def farthest_point_indices(cloud: np.ndarray, k: int) -> np.ndarray:
    """Greedy farthest-point selection started at row 0; ties pick the lowest index."""
    chosen = np.empty(k, dtype=np.intp)
    chosen[0] = 0
    d = np.linalg.norm(cloud - cloud[0], axis=1)
    for step in range(1, k):
        nxt = int(np.argmax(d))
        chosen[step] = nxt
        d = np.minimum(d, np.linalg.norm(cloud - cloud[nxt], axis=1))
    return chosen
