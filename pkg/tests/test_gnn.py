"""Radius graphs over proposals and the iterative state refinement."""

import numpy as np
import pytest

from graphdet.gnn import (
    GraphNode,
    GraphUpdater,
    NeighborhoodGraph,
    build_graph,
    graph_header,
    header_backward,
    header_forward,
    refine_proposals,
    update_backward,
    update_extended,
    update_extended_forward,
    update_vanilla,
    update_vanilla_forward,
)
from graphdet.nnet import DenseLayer, DenseStack
from graphdet.scene import Box3D

from oracles import brute_radius_graph


def make_proposals(centres, states):
    out = []
    for centre, state in zip(centres, states):
        box = Box3D(tuple(centre), (3.9, 1.6, 1.56), 0.0)
        out.append((box, np.asarray(state, dtype=float)))
    return out


def line_proposals(n, spacing, state_dim, seed=0):
    rng = np.random.default_rng(seed)
    centres = [(i * spacing, 0.0, 0.0) for i in range(n)]
    return make_proposals(centres, rng.normal(size=(n, state_dim)))


# ---------------------------------------------------------------------------
# graph construction


def test_single_node_gets_a_self_loop():
    graph = build_graph(line_proposals(1, 1.0, 4), radius=2.0)
    assert graph.adjacency == ((0,),)


def test_two_nodes_connect_only_inside_radius():
    proposals = line_proposals(2, 1.0, 4)
    near = build_graph(proposals, radius=2.0)
    assert near.adjacency == ((0, 1), (0, 1))
    far = build_graph(proposals, radius=0.5)
    assert far.adjacency == ((0,), (1,))


def test_boundary_distance_is_excluded():
    # centres exactly one radius apart: strictly-closer means no edge
    graph = build_graph(line_proposals(2, 1.0, 4), radius=1.0)
    assert graph.adjacency == ((0,), (1,))


def test_build_graph_validates_radius():
    with pytest.raises(ValueError, match="radius"):
        build_graph(line_proposals(2, 1.0, 4), radius=0.0)
    with pytest.raises(ValueError, match="radius"):
        build_graph(line_proposals(2, 1.0, 4), radius=float("nan"))


def test_empty_graph():
    graph = build_graph([], radius=2.0)
    assert len(graph) == 0
    updater = GraphUpdater.seeded(4, 8, 2, seed=0)
    assert update_extended(graph, updater).size == 0
    cls = DenseStack.seeded((4, 1), 0)
    reg = DenseStack.seeded((4, 7), 1)
    assert refine_proposals(graph, np.empty((0, 4)), cls, reg) == []


def test_build_graph_matches_all_pairs_oracle():
    rng = np.random.default_rng(10)
    for trial in range(10):
        n = int(rng.integers(2, 60))
        centres = rng.uniform(-8.0, 8.0, size=(n, 3))
        radius = float(rng.uniform(0.5, 6.0))
        proposals = make_proposals(centres, rng.normal(size=(n, 3)))
        graph = build_graph(proposals, radius=radius)
        assert list(graph.adjacency) == brute_radius_graph(centres, radius)


def test_graph_validation():
    node = GraphNode(np.zeros(3), np.zeros(2), 0)
    other = GraphNode(np.ones(3), np.zeros(2), 1)
    with pytest.raises(ValueError, match="self-loop"):
        NeighborhoodGraph((node,), ((),), 1.0)
    with pytest.raises(ValueError, match="symmetric"):
        NeighborhoodGraph((node, other), ((0, 1), (1,)), 1.0)
    with pytest.raises(ValueError, match="references"):
        NeighborhoodGraph((node,), ((0, 5),), 1.0)
    with pytest.raises(ValueError, match="adjacency list per node"):
        NeighborhoodGraph((node, other), ((0,),), 1.0)
    wide = GraphNode(np.zeros(3), np.zeros(5), 1)
    with pytest.raises(ValueError, match="one width"):
        NeighborhoodGraph((node, wide), ((0,), (1,)), 1.0)


# ---------------------------------------------------------------------------
# refinement updates


def identity_stack(dim):
    return DenseStack([DenseLayer(np.eye(dim), np.zeros(dim), "none")])


def test_depth_zero_is_the_identity():
    graph = build_graph(line_proposals(5, 1.0, 6), radius=1.5)
    updater = GraphUpdater.seeded(6, 8, 0, seed=3)
    assert np.array_equal(update_vanilla(graph, updater), graph.states_matrix())
    ext = GraphUpdater.seeded(6, 8, 0, seed=3, extended=True)
    assert np.array_equal(update_extended(graph, ext), graph.states_matrix())


def test_zeroed_fusion_leaves_states_untouched():
    graph = build_graph(line_proposals(6, 1.0, 5, seed=1), radius=1.5)
    updater = GraphUpdater.seeded(5, 8, 3, seed=4, extended=True)
    for stack in updater.fus_stacks:
        stack.set_flat_params(np.zeros(stack.n_params))
    assert np.array_equal(update_extended(graph, updater), graph.states_matrix())


def test_vanilla_update_hand_unrolled_on_a_path():
    """Two identity iterations over a 3-node path, checked against integers."""
    proposals = make_proposals(
        [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (2.0, 0.0, 0.0)],
        [[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]],
    )
    graph = build_graph(proposals, radius=1.5)
    assert graph.adjacency == ((0, 1), (0, 1, 2), (1, 2))
    relu_identity = DenseStack([DenseLayer(np.eye(2), np.zeros(2), "relu")])
    updater = GraphUpdater(
        [identity_stack(2), identity_stack(2)],
        [relu_identity.copy(), relu_identity.copy()],
    )
    refined = update_vanilla(graph, updater)
    # iteration 1: h = [[2,2],[3,4],[6,3]]; iteration 2 pools those again
    assert np.array_equal(refined, [[5.0, 6.0], [9.0, 8.0], [12.0, 7.0]])


def test_extended_update_hand_unrolled_two_nodes():
    proposals = make_proposals(
        [(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)], [[1.0], [5.0]]
    )
    graph = build_graph(proposals, radius=2.0)
    agg = identity_stack(4)  # rows are [dx, dy, dz, state]
    fus = DenseStack([DenseLayer(np.array([[1.0, 0.0, 0.0, 1.0]]), np.zeros(1), "relu")])
    align = DenseStack.zeros((1, 3), ["none"])  # no alignment: offsets stay x_i - x_j
    updater = GraphUpdater([agg], [fus], [align])
    refined = update_extended(graph, updater)
    # node 0 rows: [0,0,0,1], [-1,0,0,5] -> pooled [0,0,0,5] -> relu(5) = 5
    # node 1 rows: [0,0,0,5], [1,0,0,1]  -> pooled [1,0,0,5] -> relu(6) = 6
    assert np.array_equal(refined, [[6.0], [11.0]])


def test_alignment_offset_shifts_a_single_node():
    """With only a self-loop the relative offset reduces to minus the
    predicted alignment."""
    proposals = make_proposals([(0.0, 0.0, 0.0)], [[-2.0]])
    graph = build_graph(proposals, radius=1.0)
    align = DenseStack([DenseLayer(np.array([[1.0], [2.0], [3.0]]), np.zeros(3), "none")])
    fus = DenseStack([DenseLayer(np.array([[1.0, 1.0, 1.0, 0.0]]), np.zeros(1), "relu")])
    updater = GraphUpdater([identity_stack(4)], [fus], [align])
    refined = update_extended(graph, updater)
    # dx = (-2, -4, -6); row = [2, 4, 6, -2]; fused = relu(12) = 12
    assert np.array_equal(refined, [[10.0]])


def test_updates_are_synchronous():
    """Iteration k must read only k-1 states: on a path, information moves
    one hop per iteration, never further."""
    proposals = line_proposals(5, 1.0, 4, seed=2)
    graph = build_graph(proposals, radius=1.5)
    updater = GraphUpdater.seeded(4, 8, 2, seed=5, extended=False)
    base = update_vanilla(graph, updater)

    bumped = [(b, s.copy()) for b, s in proposals]
    bumped[4] = (bumped[4][0], bumped[4][1] + 10.0)
    moved = update_vanilla(build_graph(bumped, radius=1.5), updater)
    # nodes 0 and 1 sit more than two hops from node 4: bitwise untouched
    assert np.array_equal(moved[0], base[0])
    assert np.array_equal(moved[1], base[1])
    assert not np.array_equal(moved, base)


def test_extended_update_is_translation_invariant():
    rng = np.random.default_rng(6)
    n = 12
    lattice = rng.integers(-40, 40, size=(n, 3)) * 0.25
    states = rng.normal(size=(n, 5))
    updater = GraphUpdater.seeded(5, 8, 3, seed=7, extended=True)
    base_graph = build_graph(make_proposals(lattice, states), radius=3.0)
    shifted = lattice + np.array([7.0, -3.0, 12.0])
    shift_graph = build_graph(make_proposals(shifted, states), radius=3.0)
    assert base_graph.adjacency == shift_graph.adjacency
    assert np.array_equal(
        update_extended(base_graph, updater), update_extended(shift_graph, updater)
    )


def test_refined_states_track_node_permutation():
    rng = np.random.default_rng(8)
    n = 15
    centres = rng.uniform(-4, 4, size=(n, 3))
    states = rng.normal(size=(n, 4))
    proposals = make_proposals(centres, states)
    updater = GraphUpdater.seeded(4, 8, 2, seed=9, extended=True)
    base = update_extended(build_graph(proposals, radius=2.5), updater)
    perm = rng.permutation(n)
    shuffled = [proposals[p] for p in perm]
    out = update_extended(build_graph(shuffled, radius=2.5), updater)
    for m, p in enumerate(perm):
        assert np.array_equal(out[m], base[p])


def test_updater_validation():
    with pytest.raises(ValueError, match="pair up"):
        GraphUpdater([DenseStack.seeded((4, 4), 0)], [])
    with pytest.raises(ValueError, match="pair with"):
        GraphUpdater(
            [DenseStack.seeded((4, 4), 0)], [DenseStack.seeded((4, 4), 1)], []
        )
    with pytest.raises(ValueError, match="non-negative"):
        GraphUpdater.seeded(4, 8, -1, seed=0)

    graph = build_graph(line_proposals(3, 1.0, 4), radius=1.5)
    wrong_width = GraphUpdater.seeded(5, 8, 1, seed=0, extended=False)
    with pytest.raises(ValueError, match="aggregation input"):
        update_vanilla(graph, wrong_width)
    vanilla_only = GraphUpdater.seeded(4, 8, 1, seed=0, extended=False)
    with pytest.raises(ValueError, match="alignment"):
        update_extended(graph, vanilla_only)


def test_update_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    n, dim = 6, 4
    centres = rng.uniform(-3, 3, size=(n, 3))
    states = rng.normal(size=(n, dim))
    target = rng.normal(size=(n, dim))

    def loss_for(updater, extended, state_matrix):
        proposals = make_proposals(centres, state_matrix)
        graph = build_graph(proposals, radius=3.0)
        forward = update_extended_forward if extended else update_vanilla_forward
        out, cache = forward(graph, updater)
        return 0.5 * float(((out - target) ** 2).sum()), cache, out

    for extended in (False, True):
        updater = GraphUpdater.seeded(dim, 6, 2, seed=12, extended=extended)
        _, cache, out = loss_for(updater, extended, states)
        grads, d_states = update_backward(cache, out - target)

        # input gradient
        h = 1e-6
        for idx in np.ndindex(3, dim):
            hi, lo = states.copy(), states.copy()
            hi[idx] += h
            lo[idx] -= h
            fd = (
                loss_for(updater, extended, hi)[0] - loss_for(updater, extended, lo)[0]
            ) / (2 * h)
            assert d_states[idx] == pytest.approx(fd, rel=1e-4, abs=1e-7)

        # a sample of parameter gradients from each stack family
        stacks = [("agg", updater.agg_stacks[0], grads.agg[0])]
        stacks.append(("fus", updater.fus_stacks[1], grads.fus[1]))
        if extended:
            stacks.append(("align", updater.align_stacks[0], grads.align[0]))
        for name, stack, stack_grads in stacks:
            flat = stack.flat_params()
            flat_grad = stack.flat_grads(stack_grads)
            for i in range(0, flat.size, max(1, flat.size // 5)):
                hi, lo = flat.copy(), flat.copy()
                hi[i] += h
                lo[i] -= h
                stack.set_flat_params(hi)
                up = loss_for(updater, extended, states)[0]
                stack.set_flat_params(lo)
                down = loss_for(updater, extended, states)[0]
                stack.set_flat_params(flat)
                fd = (up - down) / (2 * h)
                assert flat_grad[i] == pytest.approx(fd, rel=1e-4, abs=1e-7), name


# ---------------------------------------------------------------------------
# detection header


def test_header_zero_stacks_score_half_and_keep_boxes():
    dim = 5
    graph = build_graph(line_proposals(4, 2.0, dim, seed=3), radius=3.0)
    cls = DenseStack.zeros((dim, 1))
    reg = DenseStack.zeros((dim, 7))
    scores, residuals, _ = header_forward(graph.states_matrix(), cls, reg)
    assert np.array_equal(scores, np.full(4, 0.5))
    assert np.array_equal(residuals, np.zeros((4, 7)))
    refined = refine_proposals(graph, graph.states_matrix(), cls, reg)
    for node, box in zip(graph.nodes, refined):
        assert box.center == pytest.approx(node.box.center)
        assert box.dims == pytest.approx(node.box.dims)
        assert box.yaw == pytest.approx(node.box.yaw)
        assert box.score == 0.5


def test_header_rejects_wrong_output_widths():
    with pytest.raises(ValueError, match="one unit"):
        header_forward(np.zeros((2, 4)), DenseStack.zeros((4, 2)), DenseStack.zeros((4, 7)))
    with pytest.raises(ValueError, match="seven units"):
        header_forward(np.zeros((2, 4)), DenseStack.zeros((4, 1)), DenseStack.zeros((4, 6)))


def test_graph_header_matches_batched_header():
    rng = np.random.default_rng(13)
    state = rng.normal(size=6)
    cls = DenseStack.seeded((6, 1), 14)
    reg = DenseStack.seeded((6, 7), 15)
    score, residuals = graph_header(state, cls, reg)
    scores, batch_res, _ = header_forward(state[None, :], cls, reg)
    assert score == scores[0]
    assert np.array_equal(residuals, batch_res[0])
    assert 0.0 < score < 1.0


def test_header_backward_matches_finite_differences():
    rng = np.random.default_rng(16)
    states = rng.normal(size=(3, 5))
    cls = DenseStack.seeded((5, 1), 17)
    reg = DenseStack.seeded((5, 7), 18)
    a = rng.normal(size=3)
    b = rng.normal(size=(3, 7))

    def loss(z):
        scores, residuals, _ = header_forward(z, cls, reg)
        return float((scores * a).sum() + (residuals * b).sum())

    _, _, cache = header_forward(states, cls, reg)
    _, _, dz = header_backward(cache, cls, reg, a, b)
    h = 1e-6
    for idx in np.ndindex(*states.shape):
        hi, lo = states.copy(), states.copy()
        hi[idx] += h
        lo[idx] -= h
        fd = (loss(hi) - loss(lo)) / (2 * h)
        assert dz[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_refine_requires_proposal_boxes():
    node = GraphNode(np.zeros(3), np.zeros(4), 0, box=None)
    graph = NeighborhoodGraph((node,), ((0,),), 1.0)
    with pytest.raises(ValueError, match="no proposal box"):
        refine_proposals(graph, np.zeros((1, 4)), DenseStack.zeros((4, 1)), DenseStack.zeros((4, 7)))
