"""Tests for box grids, transition graphs, closures, and chain components."""

import numpy as np
import pytest

from affinecontrol.reach import (
    BoxGrid,
    BoxSet,
    MemoryBudgetError,
    build_transition_graph,
    chain_components,
    closure,
    control_set_approx,
    is_invariant_in_window,
    refine,
)
from affinecontrol.system import AffineSystem

from conftest import planar_saddle_system


def contraction_1d() -> AffineSystem:
    # dx/dt = -x, no control influence
    return AffineSystem([[-1.0]], [[[0.0]]], [[0.0]], [0.0], [-1.0], [1.0])


def shift_1d() -> AffineSystem:
    # dx/dt = x + u, u in [-1, 1]
    return AffineSystem([[1.0]], [[[0.0]]], [[1.0]], [0.0], [-1.0], [1.0])


def zero_field(n=2) -> AffineSystem:
    return AffineSystem(np.zeros((n, n)), np.zeros((1, n, n)), np.zeros((n, 1)),
                        np.zeros(n), [-1.0], [1.0])


# ---------------------------------------------------------------------- grid

def test_grid_index_maps_are_inverse_bijections():
    grid = BoxGrid([-4.0, -3.0], [2.0, 5.0], [128, 128])
    assert grid.size == 128 * 128
    idx = np.arange(grid.size)
    assert np.array_equal(grid.flat_index(grid.multi_index(idx)), idx)
    centers = grid.centers(idx[:100])
    assert np.array_equal(grid.box_of(centers), idx[:100])


def test_grid_box_of_outside_window():
    grid = BoxGrid([0.0], [1.0], [4])
    assert np.array_equal(grid.box_of([[-0.1], [0.5], [1.5]]), [-1, 2, -1])


def test_grid_rejects_bad_window():
    with pytest.raises(ValueError):
        BoxGrid([0.0], [0.0], [4])
    with pytest.raises(ValueError):
        BoxGrid([0.0], [1.0], [0])


def test_boxset_operations_and_rle():
    grid = BoxGrid([0.0], [1.0], [10])
    a = BoxSet(grid, [1, 2, 3, 7])
    b = BoxSet(grid, [3, 4])
    assert len(a.union(b)) == 5
    assert a.intersection(b).indices.tolist() == [3]
    assert a.difference(b).indices.tolist() == [1, 2, 7]
    assert a.run_length_encoding() == [[1, 3], [7, 1]]
    assert 7 in a and 5 not in a
    assert abs(a.volume - 0.4) < 1e-15


# --------------------------------------------------------------------- graphs

def test_zero_field_gives_only_self_loops():
    grid = BoxGrid([-1.0, -1.0], [1.0, 1.0], [4, 4])
    graph = build_transition_graph(zero_field(), grid, [[0.0]], dt=0.5,
                                   pts_per_box=2, seed=0)
    for p in range(graph.num_boxes):
        assert graph.successors(p).tolist() == [p]
    assert not graph.sink.any()


def test_contraction_edges_move_toward_origin():
    grid = BoxGrid([-1.0], [1.0], [16])
    graph = build_transition_graph(contraction_1d(), grid, [[0.0]], dt=0.5,
                                   pts_per_box=3, seed=0)
    centers = grid.centers(np.arange(16))[:, 0]
    for p in range(16):
        for q in graph.successors(p):
            assert abs(centers[q]) <= abs(centers[p]) + 1e-12


def test_contraction_closure_matches_hand_enumeration():
    # independent oracle: BFS over the 16 boxes by direct arithmetic on the
    # center map x -> x e^{-1/2}
    grid = BoxGrid([-1.0], [1.0], [16])
    graph = build_transition_graph(contraction_1d(), grid, [[0.0]], dt=0.5,
                                   pts_per_box=1, seed=0)
    seed = grid.box_containing([0.9])
    assert seed == 15

    def center(i):
        return -1.0 + (i + 0.5) * 0.125

    def box(x):
        return int(np.floor((x + 1.0) / 0.125))

    expected = {seed}
    frontier = [seed]
    while frontier:
        i = frontier.pop()
        j = box(center(i) * np.exp(-0.5))
        if j not in expected:
            expected.add(j)
            frontier.append(j)
    fwd = closure(graph, BoxSet(grid, [seed]), "forward")
    assert fwd.indices.tolist() == sorted(expected)
    # the orbit never crosses 0 and stays weakly inside the seed's box
    assert min(expected) >= 8 and max(expected) == seed


def test_closure_is_monotone_and_idempotent():
    grid = BoxGrid([-1.0], [1.0], [16])
    graph = build_transition_graph(contraction_1d(), grid, [[0.0]], dt=0.5,
                                   pts_per_box=2, seed=0)
    all_boxes = BoxSet(grid, np.arange(16))
    assert closure(graph, all_boxes, "forward").equals(all_boxes)
    small = BoxSet(grid, [15])
    big = BoxSet(grid, [12, 15])
    c_small = closure(graph, small, "forward")
    c_big = closure(graph, big, "forward")
    assert len(c_small.difference(c_big)) == 0


def test_graph_determinism():
    grid = BoxGrid([-2.0, -2.0], [2.0, 2.0], [12, 12])
    sys = planar_saddle_system()
    g1 = build_transition_graph(sys, grid, [[-1.0], [0.0], [1.0]], 0.25, 3, seed=4)
    g2 = build_transition_graph(sys, grid, [[-1.0], [0.0], [1.0]], 0.25, 3, seed=4)
    assert np.array_equal(g1.indptr, g2.indptr)
    assert np.array_equal(g1.targets, g2.targets)
    assert np.array_equal(g1.sink, g2.sink)


def test_memory_budget_checked_before_allocation():
    grid = BoxGrid([-1.0, -1.0], [1.0, 1.0], [100, 100])
    with pytest.raises(MemoryBudgetError):
        build_transition_graph(zero_field(), grid, [[0.0]], 0.5, 5, seed=0,
                               memory_cap=1000)


# ----------------------------------------------------------- control sets

def test_control_set_zero_field_is_seed_box():
    grid = BoxGrid([-1.0, -1.0], [1.0, 1.0], [8, 8])
    graph = build_transition_graph(zero_field(), grid, [[0.0]], 0.5, 1, seed=0)
    seed = grid.box_containing([0.3, -0.2])
    approx = control_set_approx(graph, seed)
    assert approx.indices.tolist() == [seed]


def test_control_set_wandering_seed_is_empty():
    # pure drift downhill: no box returns to itself
    sys = AffineSystem([[0.0]], [[[0.0]]], [[0.0]], [-1.0], [-0.5], [0.5])
    grid = BoxGrid([-1.0], [1.0], [16])
    graph = build_transition_graph(sys, grid, [[0.0]], 0.5, 1, seed=0)
    approx = control_set_approx(graph, grid.box_containing([0.4]))
    assert len(approx) == 0


def test_control_set_1d_interval_between_extreme_equilibria():
    # dx/dt = x + u: equilibria x = -u sweep [-1, 1]; phase-line reasoning
    # gives approximate controllability exactly on (-1, 1)
    grid = BoxGrid([-2.0], [2.0], [64])
    graph = build_transition_graph(shift_1d(), grid,
                                   [[-1.0], [-0.5], [0.0], [0.5], [1.0]],
                                   dt=0.25, pts_per_box=3, seed=0)
    approx = control_set_approx(graph, grid.box_containing([0.0]))
    centers = approx.centers()[:, 0]
    box_w = grid.widths[0]
    assert centers.min() >= -1.0 - 2 * box_w
    assert centers.max() <= 1.0 + 2 * box_w
    # the interior is fully covered
    inner = grid.box_of(np.linspace(-0.9, 0.9, 30)[:, None])
    assert all(b in approx for b in inner)


def test_planar_saddle_control_set_coarse():
    # coarse run of the planar-saddle scenario: the control set fills
    # (-2, 0) x [-1, 3] up to a boundary layer
    sys = planar_saddle_system()
    grid = BoxGrid([-4.0, -3.0], [2.0, 5.0], [48, 48])
    controls = [[-1.0], [-0.5], [0.0], [0.5], [1.0]]
    graph = build_transition_graph(sys, grid, controls, 0.25, 3, seed=0)
    seed = grid.box_containing([-1.0, 1.0])
    approx = control_set_approx(graph, seed)
    centers = approx.centers()
    wx, wy = grid.widths
    assert centers[:, 0].min() >= -2.0 - 2 * wx
    assert centers[:, 0].max() <= 0.0 + 2 * wx
    assert centers[:, 1].min() >= -1.0 - 2 * wy
    assert centers[:, 1].max() <= 3.0 + 2 * wy
    # interior points are covered
    probe = np.array([[-1.0, 1.0], [-0.5, 0.0], [-1.5, 2.5], [-1.0, -0.5]])
    for b in grid.box_of(probe):
        assert b in approx


def test_planar_saddle_seed_independence():
    sys = planar_saddle_system()
    grid = BoxGrid([-4.0, -3.0], [2.0, 5.0], [48, 48])
    controls = [[-1.0], [-0.5], [0.0], [0.5], [1.0]]
    graph = build_transition_graph(sys, grid, controls, 0.25, 3, seed=0)
    seeds = [[-1.0, 1.0], [-0.5, 0.5], [-1.5, -0.5], [-0.3, -0.7], [-1.2, 1.9]]
    sets = [control_set_approx(graph, grid.box_containing(s)) for s in seeds]
    for s in sets[1:]:
        assert s.equals(sets[0])


def test_invariance_flag():
    # the contraction keeps everything inside; pure drift leaves the window
    grid = BoxGrid([-1.0], [1.0], [16])
    graph = build_transition_graph(contraction_1d(), grid, [[0.0]], 0.5, 2, seed=0)
    whole = closure(graph, BoxSet(grid, [grid.box_containing([0.9])]), "forward")
    assert is_invariant_in_window(graph, whole)
    sys = AffineSystem([[0.0]], [[[0.0]]], [[0.0]], [1.0], [-0.5], [0.5])
    drift = build_transition_graph(sys, grid, [[0.0]], 0.5, 2, seed=0)
    assert not is_invariant_in_window(drift, BoxSet(grid, [8]))


# ------------------------------------------------------------------ SCC / refine

def test_chain_components_zero_field():
    grid = BoxGrid([-1.0, -1.0], [1.0, 1.0], [4, 4])
    graph = build_transition_graph(zero_field(), grid, [[0.0]], 0.5, 1, seed=0)
    comps = chain_components(graph)
    assert len(comps) == 16
    assert all(len(c) == 1 for c in comps)


def hand_scc(adj: dict) -> list[frozenset]:
    """Independent Kosaraju SCC on a dict-of-sets adjacency."""
    order = []
    seen = set()

    def dfs(node, graph, out):
        stack = [(node, iter(sorted(graph.get(node, ()))))]
        seen.add(node)
        while stack:
            cur, it = stack[-1]
            advanced = False
            for nxt in it:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append((nxt, iter(sorted(graph.get(nxt, ())))))
                    advanced = True
                    break
            if not advanced:
                stack.pop()
                out.append(cur)

    nodes = sorted(adj)
    for v in nodes:
        if v not in seen:
            dfs(v, adj, order)
    radj = {v: set() for v in nodes}
    for v, targets in adj.items():
        for w in targets:
            radj[w].add(v)
    seen = set()
    comps = []
    for v in reversed(order):
        if v not in seen:
            comp = []
            dfs(v, radj, comp)
            comps.append(frozenset(comp))
    return comps


def test_chain_components_contraction_matches_hand_scc():
    # the chain-recurrent set of dx/dt = -x is {0}; at box resolution the
    # surviving components are self-looping boxes clustered at the origin
    grid = BoxGrid([-1.0], [1.0], [16])
    graph = build_transition_graph(contraction_1d(), grid, [[0.0]], 0.5, 3, seed=0)
    adj = {p: set(graph.successors(p).tolist()) for p in range(graph.num_boxes)}
    expected = [c for c in hand_scc(adj)
                if len(c) >= 2 or next(iter(c)) in adj[next(iter(c))]]
    comps = chain_components(graph)
    got = [frozenset(graph.position_of(c.indices).tolist()) for c in comps]
    assert sorted(map(sorted, got)) == sorted(map(sorted, expected))
    # outer approximation: the box containing the origin survives, and all
    # surviving boxes hug the origin
    members = np.concatenate([c.indices for c in comps])
    assert grid.box_containing([0.0]) in members
    assert np.max(np.abs(grid.centers(members)[:, 0])) <= 3 * grid.widths[0]


def test_chain_components_disjoint_and_closed():
    sys = planar_saddle_system()
    grid = BoxGrid([-4.0, -3.0], [2.0, 5.0], [32, 32])
    graph = build_transition_graph(sys, grid, [[-1.0], [1.0]], 0.25, 2, seed=0)
    comps = chain_components(graph)
    for i, a in enumerate(comps):
        for b in comps[i + 1:]:
            assert len(a.intersection(b)) == 0
    # each component is both-direction closed within itself
    for comp in comps[:3]:
        fwd = closure(graph, comp, "forward", include_start=False)
        bwd = closure(graph, comp, "backward", include_start=False)
        assert len(comp.difference(fwd.intersection(bwd))) == 0


def test_chain_component_contains_control_set():
    sys = planar_saddle_system()
    grid = BoxGrid([-4.0, -3.0], [2.0, 5.0], [48, 48])
    controls = [[-1.0], [-0.5], [0.0], [0.5], [1.0]]
    graph = build_transition_graph(sys, grid, controls, 0.25, 3, seed=0)
    approx = control_set_approx(graph, grid.box_containing([-1.0, 1.0]))
    comps = chain_components(graph)
    assert len(approx.difference(comps[0])) == 0


def test_refine_empty_keep_gives_empty_grid():
    grid = BoxGrid([-1.0], [1.0], [8])
    graph = build_transition_graph(contraction_1d(), grid, [[0.0]], 0.5, 1, seed=0)
    fine, fine_graph = refine(contraction_1d(), graph,
                              BoxSet(grid, np.empty(0, dtype=np.int64)), 2)
    assert fine.size == 16
    assert fine_graph.num_boxes == 0


def test_refine_shrinks_symmetric_difference():
    # refining the planar-saddle component tightens the match with the
    # closed-form control set (-2, 0) x [-1, 3]
    sys = planar_saddle_system()
    grid = BoxGrid([-4.0, -3.0], [2.0, 5.0], [24, 24])
    controls = [[-1.0], [-0.5], [0.0], [0.5], [1.0]]
    graph = build_transition_graph(sys, grid, controls, 0.25, 3, seed=0)

    def sd_volume(box_set):
        g = box_set.grid
        lo_c = g.lower_corners(box_set.indices)
        hi_c = lo_c + g.widths
        inter_lo = np.maximum(lo_c, [-2.0, -1.0])
        inter_hi = np.minimum(hi_c, [0.0, 3.0])
        inter = np.prod(np.clip(inter_hi - inter_lo, 0.0, None), axis=1).sum()
        return (box_set.volume - inter) + (8.0 - inter)

    approx = control_set_approx(graph, grid.box_containing([-1.0, 1.0]))
    volumes = [sd_volume(approx)]
    for _ in range(2):
        grid, graph = refine(sys, graph, approx, 2)
        approx = control_set_approx(graph, grid.box_containing([-1.0, 1.0]))
        volumes.append(sd_volume(approx))
    assert volumes[1] < volumes[0]
    assert volumes[2] < volumes[1]


def test_refine_closure_commutes_up_to_collar():
    sys = contraction_1d()
    grid = BoxGrid([-1.0], [1.0], [16])
    graph = build_transition_graph(sys, grid, [[0.0]], 0.5, 2, seed=0)
    keep = closure(graph, BoxSet(grid, [grid.box_containing([0.9])]), "forward")
    fine, fine_graph = refine(sys, graph, keep, 2)
    seed_fine = fine.box_containing([0.9])
    fine_closure = closure(fine_graph, BoxSet(fine, [seed_fine]), "forward")
    # map fine boxes back to their coarse parents
    parents = grid.flat_index(fine.multi_index(fine_closure.indices) // 2)
    coarse_cover = keep.dilate(1)
    assert all(p in coarse_cover for p in np.unique(parents))
