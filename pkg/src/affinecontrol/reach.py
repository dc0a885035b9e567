"""Box coverings, transition graphs, control-set and chain-set approximation.

A compact window is covered by an axis-aligned grid of boxes.  Sampled
controls applied for a fixed step define a directed graph on boxes; its
reachability closures approximate reachable sets, intersections of forward
and backward closures approximate control sets, and strongly connected
components approximate chain control sets from the outside (the box
diameter plays the role of the chain jump size, the step time the role of
the minimal chain time).  Results are always relative to the window:
transitions leaving it go to an absorbing sink that closures exclude.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.stats import qmc

from .config import DEFAULT_MEMORY_CAP
from .system import AffineSystem, segment_map

__all__ = [
    "BoxGrid",
    "BoxSet",
    "TransitionGraph",
    "MemoryBudgetError",
    "build_transition_graph",
    "closure",
    "control_set_approx",
    "chain_components",
    "refine",
    "is_invariant_in_window",
]


class MemoryBudgetError(RuntimeError):
    """Planned allocation exceeds the configured cap; raised before allocating."""


@dataclass(frozen=True)
class BoxGrid:
    """Uniform axis-aligned box covering of a rectangular window."""

    lo: np.ndarray
    hi: np.ndarray
    subdivisions: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        subs = np.asarray(self.subdivisions, dtype=np.int64).reshape(-1)
        if lo.shape != hi.shape or lo.shape != subs.shape:
            raise ValueError("lo, hi, subdivisions must have equal lengths")
        if np.any(lo >= hi):
            raise ValueError("window must satisfy lo < hi per dimension")
        if np.any(subs < 1):
            raise ValueError("need at least one box per dimension")
        for arr, name in ((lo, "lo"), (hi, "hi")):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
        lo.setflags(write=False)
        hi.setflags(write=False)
        subs.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "subdivisions", subs)

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def size(self) -> int:
        return int(np.prod(self.subdivisions))

    @property
    def widths(self) -> np.ndarray:
        return (self.hi - self.lo) / self.subdivisions

    @property
    def box_volume(self) -> float:
        return float(np.prod(self.widths))

    def multi_index(self, indices) -> np.ndarray:
        """(k, dim) array of per-axis indices for flat box indices."""
        indices = np.asarray(indices, dtype=np.int64)
        return np.stack(np.unravel_index(indices, self.subdivisions), axis=-1)

    def flat_index(self, multi) -> np.ndarray:
        multi = np.asarray(multi, dtype=np.int64)
        return np.ravel_multi_index(tuple(multi.T), self.subdivisions)

    def centers(self, indices) -> np.ndarray:
        return self.lo + (self.multi_index(indices) + 0.5) * self.widths

    def lower_corners(self, indices) -> np.ndarray:
        return self.lo + self.multi_index(indices) * self.widths

    def box_of(self, points) -> np.ndarray:
        """Flat box index per point, or -1 for points outside the window."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = np.floor((pts - self.lo) / self.widths).astype(np.int64)
        inside = np.all((rel >= 0) & (rel < self.subdivisions), axis=1)
        inside &= np.all(np.isfinite(pts), axis=1)
        out = np.full(pts.shape[0], -1, dtype=np.int64)
        if np.any(inside):
            out[inside] = np.ravel_multi_index(tuple(rel[inside].T), self.subdivisions)
        return out

    def box_containing(self, point) -> int:
        idx = self.box_of(np.asarray(point, dtype=float)[None, :])[0]
        if idx < 0:
            raise ValueError(f"point {point} lies outside the window")
        return int(idx)


@dataclass(frozen=True)
class BoxSet:
    """Subset of a grid's boxes, stored as a sorted unique index array."""

    grid: BoxGrid
    indices: np.ndarray

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= self.grid.size):
            raise ValueError("box index out of range")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)

    def __contains__(self, index) -> bool:
        pos = np.searchsorted(self.indices, index)
        return bool(pos < self.indices.size and self.indices[pos] == index)

    @property
    def volume(self) -> float:
        return len(self) * self.grid.box_volume

    def centers(self) -> np.ndarray:
        return self.grid.centers(self.indices)

    def union(self, other: "BoxSet") -> "BoxSet":
        return BoxSet(self.grid, np.union1d(self.indices, other.indices))

    def intersection(self, other: "BoxSet") -> "BoxSet":
        return BoxSet(self.grid, np.intersect1d(self.indices, other.indices))

    def difference(self, other: "BoxSet") -> "BoxSet":
        return BoxSet(self.grid, np.setdiff1d(self.indices, other.indices))

    def equals(self, other: "BoxSet") -> bool:
        return np.array_equal(self.indices, other.indices)

    def dilate(self, radius: int = 1) -> "BoxSet":
        """Chebyshev dilation by `radius` boxes, clipped to the window."""
        if len(self) == 0 or radius == 0:
            return self
        multi = self.grid.multi_index(self.indices)
        offsets = np.stack(np.meshgrid(
            *([np.arange(-radius, radius + 1)] * self.grid.dim),
            indexing="ij"), axis=-1).reshape(-1, self.grid.dim)
        grown = (multi[:, None, :] + offsets[None, :, :]).reshape(-1, self.grid.dim)
        ok = np.all((grown >= 0) & (grown < self.grid.subdivisions), axis=1)
        return BoxSet(self.grid, self.grid.flat_index(grown[ok]))

    def run_length_encoding(self) -> list:
        """Sorted indices as [start, length] runs (compact JSON form)."""
        if len(self) == 0:
            return []
        idx = self.indices
        breaks = np.where(np.diff(idx) != 1)[0]
        starts = np.concatenate([[0], breaks + 1])
        ends = np.concatenate([breaks, [idx.size - 1]])
        return [[int(idx[s]), int(e - s + 1)] for s, e in zip(starts, ends)]


@dataclass(frozen=True)
class TransitionGraph:
    """Directed one-step transition graph over (a subset of) a grid's boxes.

    `boxes` lists the participating flat box indices (sorted); adjacency is
    CSR over positions into that list.  `sink` marks boxes with at least
    one sampled transition leaving the window (or the active subset).
    """

    grid: BoxGrid
    boxes: np.ndarray
    indptr: np.ndarray
    targets: np.ndarray
    sink: np.ndarray
    dt: float
    controls: np.ndarray
    pts_per_box: int
    seed: int
    _reverse: tuple = field(repr=False, default=None)

    @property
    def num_boxes(self) -> int:
        return int(self.boxes.size)

    @property
    def num_edges(self) -> int:
        return int(self.targets.size)

    def position_of(self, box_indices) -> np.ndarray:
        """Positions of flat box indices inside `boxes` (-1 if absent)."""
        box_indices = np.asarray(box_indices, dtype=np.int64)
        pos = np.searchsorted(self.boxes, box_indices)
        pos = np.clip(pos, 0, max(self.num_boxes - 1, 0))
        ok = self.num_boxes > 0
        good = ok & (self.boxes[pos] == box_indices)
        return np.where(good, pos, -1)

    def successors(self, position: int) -> np.ndarray:
        return self.targets[self.indptr[position]:self.indptr[position + 1]]

    def reverse(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR of the reversed graph (cached)."""
        if self._reverse is not None:
            return self._reverse
        n = self.num_boxes
        rmat = sparse.csr_matrix(
            (np.ones(self.targets.size, dtype=np.int8),
             self.targets, self.indptr), shape=(n, n)).T.tocsr()
        rev = (rmat.indptr.astype(np.int64), rmat.indices.astype(np.int64))
        object.__setattr__(self, "_reverse", rev)
        return rev

    def to_sparse(self) -> sparse.csr_matrix:
        n = self.num_boxes
        return sparse.csr_matrix(
            (np.ones(self.targets.size, dtype=np.int8), self.targets, self.indptr),
            shape=(n, n))

    def has_self_loop(self) -> np.ndarray:
        loops = np.zeros(self.num_boxes, dtype=bool)
        for p in range(self.num_boxes):
            row = self.successors(p)
            pos = np.searchsorted(row, p)
            if pos < row.size and row[pos] == p:
                loops[p] = True
        return loops


def _test_points(grid: BoxGrid, boxes: np.ndarray, pts_per_box: int,
                 seed: int) -> np.ndarray:
    """(P, N, dim) test points: box centers plus seeded Halton offsets."""
    centers = grid.centers(boxes)
    pts = [centers]
    extra = pts_per_box - 1
    if extra > 0:
        sampler = qmc.Halton(d=grid.dim, scramble=True, seed=seed)
        offsets = sampler.random(extra)  # same relative offsets in every box
        lower = grid.lower_corners(boxes)
        for k in range(extra):
            pts.append(lower + offsets[k] * grid.widths)
    return np.stack(pts)


def build_transition_graph(sys: AffineSystem, grid: BoxGrid, controls,
                           dt: float, pts_per_box: int, seed: int,
                           active: BoxSet | None = None,
                           memory_cap: int = DEFAULT_MEMORY_CAP) -> TransitionGraph:
    """Sample the dt-flow from every box under every control value.

    For each test point (center plus seeded low-discrepancy samples) and
    each control the exact dt-map is applied; an edge is added to the box
    containing the image, or the source is flagged as feeding the sink
    when the image leaves the window (or the active subset).  Deterministic
    for a fixed seed.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if pts_per_box < 1:
        raise ValueError("pts_per_box must be >= 1")
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    if controls.shape[1] != sys.m:
        raise ValueError("control samples must have the system's control dimension")
    for u in controls:
        if not sys.contains_control(u):
            raise ValueError(f"control sample {u} outside the control box")
    boxes = active.indices if active is not None else np.arange(grid.size, dtype=np.int64)
    n_boxes = boxes.size
    work_items = n_boxes * pts_per_box * controls.shape[0]
    if work_items > memory_cap:
        raise MemoryBudgetError(
            f"{work_items} point-control samples exceed the cap of {memory_cap}; "
            f"coarsen the grid, reduce samples, or raise the cap")

    points = _test_points(grid, boxes, pts_per_box, seed)  # (P, N, dim)
    P = points.shape[0]
    src = np.tile(np.arange(n_boxes, dtype=np.int64), P * controls.shape[0])
    tgt_chunks = []
    for u in controls:
        G, h = segment_map(sys, u, dt)
        for k in range(P):
            with np.errstate(over="ignore", invalid="ignore"):
                images = points[k] @ G.T + h
            tgt_chunks.append(grid.box_of(images))
    tgt_boxes = np.concatenate(tgt_chunks) if tgt_chunks else np.empty(0, dtype=np.int64)

    # map target boxes to positions; outside window or inactive -> sink
    tgt_pos = np.full(tgt_boxes.shape, -1, dtype=np.int64)
    in_window = tgt_boxes >= 0
    if np.any(in_window):
        pos = np.searchsorted(boxes, tgt_boxes[in_window])
        pos = np.clip(pos, 0, max(n_boxes - 1, 0))
        hit = boxes[pos] == tgt_boxes[in_window]
        sub = np.full(pos.shape, -1, dtype=np.int64)
        sub[hit] = pos[hit]
        tgt_pos[in_window] = sub

    sink = np.zeros(n_boxes, dtype=bool)
    to_sink = tgt_pos < 0
    if np.any(to_sink):
        sink[np.unique(src[to_sink])] = True
    keep = ~to_sink
    if np.any(keep):
        enc = src[keep] * np.int64(n_boxes) + tgt_pos[keep]
        enc = np.unique(enc)
        e_src = enc // n_boxes
        e_tgt = enc % n_boxes
    else:
        e_src = np.empty(0, dtype=np.int64)
        e_tgt = np.empty(0, dtype=np.int64)
    indptr = np.zeros(n_boxes + 1, dtype=np.int64)
    np.add.at(indptr, e_src + 1, 1)
    indptr = np.cumsum(indptr)
    return TransitionGraph(grid=grid, boxes=boxes.copy(), indptr=indptr,
                           targets=e_tgt, sink=sink, dt=float(dt),
                           controls=controls, pts_per_box=pts_per_box, seed=seed)


def _bfs(indptr: np.ndarray, targets: np.ndarray, starts: np.ndarray,
         include_start: bool) -> np.ndarray:
    n = indptr.size - 1
    seen = np.zeros(n, dtype=bool)
    stack = list(starts)
    if include_start:
        seen[starts] = True
    while stack:
        node = stack.pop()
        row = targets[indptr[node]:indptr[node + 1]]
        new = row[~seen[row]]
        seen[new] = True
        stack.extend(new.tolist())
    return np.flatnonzero(seen)


def closure(graph: TransitionGraph, from_set: BoxSet, direction: str = "forward",
            include_start: bool = True) -> BoxSet:
    """Reachability closure of a box set in the graph (sink excluded).

    direction "forward" follows edges, "backward" follows them reversed;
    with include_start=False only boxes reachable in at least one step are
    returned.  Monotone in `from_set`.
    """
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    if len(from_set) == 0:
        raise ValueError("from_set must be nonempty")
    starts = graph.position_of(from_set.indices)
    starts = starts[starts >= 0]
    if starts.size == 0:
        return BoxSet(graph.grid, np.empty(0, dtype=np.int64))
    if direction == "forward":
        indptr, targets = graph.indptr, graph.targets
    else:
        indptr, targets = graph.reverse()
    reached = _bfs(indptr, targets, starts, include_start)
    return BoxSet(graph.grid, graph.boxes[reached])


def control_set_approx(graph: TransitionGraph, seed_box: int) -> BoxSet:
    """Approximate the control set whose interior contains the seed box.

    Intersection of the strictly-forward and strictly-backward reachable
    sets of the seed box: exactly the boxes lying on a directed cycle
    through the seed, so seeds in the interior of the same control set
    give identical results.  A wandering seed yields the empty set.
    """
    pos = graph.position_of(np.array([seed_box]))[0]
    if pos < 0:
        raise ValueError("seed box is not part of the graph")
    seed_set = BoxSet(graph.grid, np.array([seed_box]))
    fwd = closure(graph, seed_set, "forward", include_start=False)
    bwd = closure(graph, seed_set, "backward", include_start=False)
    return fwd.intersection(bwd)


def chain_components(graph: TransitionGraph) -> list[BoxSet]:
    """Strongly connected components with at least one internal edge.

    Ordered by size descending (ties by smallest box index); these
    outer-approximate chain control sets and tighten as the grid refines.
    """
    if graph.num_boxes == 0:
        return []
    n_comp, labels = csgraph.connected_components(
        graph.to_sparse(), directed=True, connection="strong")
    loops = graph.has_self_loop()
    counts = np.bincount(labels, minlength=n_comp)
    keep = []
    for comp in range(n_comp):
        members = np.flatnonzero(labels == comp)
        if members.size >= 2 or loops[members[0]]:
            keep.append(BoxSet(graph.grid, graph.boxes[members]))
    keep.sort(key=lambda s: (-len(s), int(s.indices[0]) if len(s) else 0))
    return keep


def refine(sys: AffineSystem, graph: TransitionGraph, keep: BoxSet, factor: int,
           dt: float | None = None, pts_per_box: int | None = None,
           seed: int | None = None,
           memory_cap: int = DEFAULT_MEMORY_CAP) -> tuple[BoxGrid, TransitionGraph]:
    """Subdivide the kept boxes by `factor` per axis and rebuild the graph.

    The refined graph is restricted to the children of the kept boxes plus
    a one-box collar in the fine grid; transitions leaving that covering
    go to the sink.  Intended loop: chain_components -> refine -> repeat.
    """
    if factor < 2:
        raise ValueError("factor must be >= 2")
    grid = graph.grid
    fine = BoxGrid(grid.lo, grid.hi, grid.subdivisions * factor)
    if len(keep) == 0:
        empty = BoxSet(fine, np.empty(0, dtype=np.int64))
        return fine, build_transition_graph(
            sys, fine, graph.controls, dt or graph.dt,
            pts_per_box or graph.pts_per_box,
            graph.seed if seed is None else seed,
            active=empty, memory_cap=memory_cap)
    coarse_multi = grid.multi_index(keep.indices)
    offsets = np.stack(np.meshgrid(*([np.arange(factor)] * grid.dim),
                                   indexing="ij"), axis=-1).reshape(-1, grid.dim)
    children = (coarse_multi[:, None, :] * factor + offsets[None, :, :]
                ).reshape(-1, grid.dim)
    active = BoxSet(fine, fine.flat_index(children)).dilate(1)
    return fine, build_transition_graph(
        sys, fine, graph.controls, dt or graph.dt,
        pts_per_box or graph.pts_per_box,
        graph.seed if seed is None else seed,
        active=active, memory_cap=memory_cap)


def is_invariant_in_window(graph: TransitionGraph, box_set: BoxSet,
                           collar: int = 1) -> bool:
    """Whether the forward closure of the set stays inside it (up to a collar).

    Any sampled transition to the sink from the closure makes the answer
    False: invariance can only be certified relative to the window.
    """
    if len(box_set) == 0:
        return True
    fwd = closure(graph, box_set, "forward")
    positions = graph.position_of(fwd.indices)
    if np.any(graph.sink[positions[positions >= 0]]):
        return False
    allowed = box_set.dilate(collar)
    return len(fwd.difference(allowed)) == 0
