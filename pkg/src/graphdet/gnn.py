"""Graph construction and iterative refinement of 3D proposals.

Proposals become nodes of a radius graph (strictly closer than ``radius``,
always including a self-loop).  Each refinement iteration transforms every
neighbour's state, max-pools the results per channel, fuses the pooled
vector, and adds it back onto the node state:

    h_i^k = h_i^{k-1} + sigma(W_f^k . max_j W_g^k . [input_j])

The vanilla update feeds neighbour states alone; the extended update
prepends the aligned relative offset ``x_i - x_j - dx_i`` where ``dx_i``
comes from a per-iteration alignment stack, making the update exactly
translation invariant.  Both updates are synchronous (iteration k reads
only k-1 states) and come with analytic backward passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geom import decode_box
from .nnet import DenseStack, LayerGrads, add_layer_grads
from .scene import Box3D


@dataclass(frozen=True)
class GraphNode:
    """One proposal node: position, feature state, and stable id."""

    coords: np.ndarray  # (3,)
    state: np.ndarray  # (F,)
    node_id: int
    box: Box3D | None = None

    def __post_init__(self) -> None:
        coords = np.asarray(self.coords, dtype=float).reshape(3).copy()
        state = np.asarray(self.state, dtype=float).reshape(-1).copy()
        if not (np.all(np.isfinite(coords)) and np.all(np.isfinite(state))):
            raise ValueError("node coords/state must be finite")
        coords.setflags(write=False)
        state.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "state", state)


@dataclass(frozen=True)
class NeighborhoodGraph:
    """Nodes plus symmetric adjacency lists (self-loops included)."""

    nodes: tuple[GraphNode, ...]
    adjacency: tuple[tuple[int, ...], ...]
    radius: float

    def __post_init__(self) -> None:
        nodes = tuple(self.nodes)
        adjacency = tuple(tuple(a) for a in self.adjacency)
        if len(adjacency) != len(nodes):
            raise ValueError("one adjacency list per node is required")
        for i, neigh in enumerate(adjacency):
            if i not in neigh:
                raise ValueError(f"node {i} is missing its self-loop")
            for j in neigh:
                if not 0 <= j < len(nodes):
                    raise ValueError(f"adjacency of node {i} references node {j}")
                if i not in adjacency[j]:
                    raise ValueError(f"edge ({i}, {j}) is not symmetric")
        if len(nodes) > 1 and len({n.state.shape[0] for n in nodes}) > 1:
            raise ValueError("all node states must share one width")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "adjacency", adjacency)

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def state_dim(self) -> int:
        return self.nodes[0].state.shape[0] if self.nodes else 0

    def states_matrix(self) -> np.ndarray:
        if not self.nodes:
            return np.empty((0, 0))
        return np.stack([n.state for n in self.nodes])

    def coords_matrix(self) -> np.ndarray:
        if not self.nodes:
            return np.empty((0, 3))
        return np.stack([n.coords for n in self.nodes])


def build_graph(
    proposals: Sequence[tuple[Box3D, np.ndarray]],
    radius: float = 2.0,
) -> NeighborhoodGraph:
    """Connect proposals whose centres lie strictly closer than ``radius``.

    Neighbour candidates come from a spatial hash with ``radius``-sized
    cells, so construction stays near-linear in the node count.  Every
    node is its own neighbour; adjacency lists are sorted ascending.
    """
    if radius <= 0 or not math.isfinite(radius):
        raise ValueError("radius must be a positive real")
    boxes = [b for b, _ in proposals]
    coords = np.array([b.center for b in boxes]).reshape(-1, 3)
    n = len(boxes)

    cells: dict[tuple[int, int, int], list[int]] = {}
    keys = []
    for i in range(n):
        key = tuple(int(math.floor(c / radius)) for c in coords[i])
        cells.setdefault(key, []).append(i)
        keys.append(key)

    r2 = radius * radius
    adjacency: list[tuple[int, ...]] = []
    for i in range(n):
        ki, kj, kk = keys[i]
        neigh = []
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for dk in (-1, 0, 1):
                    for j in cells.get((ki + di, kj + dj, kk + dk), ()):
                        d = coords[i] - coords[j]
                        if float(d @ d) < r2:
                            neigh.append(j)
        adjacency.append(tuple(sorted(neigh)))

    nodes = tuple(
        GraphNode(coords[i], np.asarray(state, dtype=float), i, box=boxes[i])
        for i, (_, state) in enumerate(proposals)
    )
    return NeighborhoodGraph(nodes, tuple(adjacency), radius)


@dataclass
class GraphUpdater:
    """Per-iteration parameter stacks for the refinement loop.

    ``agg_stacks[k]`` transforms neighbour inputs before max-pooling,
    ``fus_stacks[k]`` fuses the pooled vector back to the state width
    (its final activation plays the role of sigma), and ``align_stacks``
    (extended mode only) predicts the 3-vector alignment offset from the
    node's own state.  Depth zero means no iterations: the update is the
    identity.
    """

    agg_stacks: list[DenseStack]
    fus_stacks: list[DenseStack]
    align_stacks: list[DenseStack] | None = None

    def __post_init__(self) -> None:
        if len(self.agg_stacks) != len(self.fus_stacks):
            raise ValueError("aggregation and fusion stacks must pair up")
        if self.align_stacks is not None and len(self.align_stacks) != len(self.agg_stacks):
            raise ValueError("alignment stacks must pair with the other stacks")

    @property
    def depth(self) -> int:
        return len(self.agg_stacks)

    @classmethod
    def seeded(
        cls,
        state_dim: int,
        hidden_dim: int,
        depth: int,
        seed: int,
        extended: bool = True,
    ) -> "GraphUpdater":
        """Single-layer stacks per iteration with seeded initial weights."""
        if depth < 0:
            raise ValueError("depth must be non-negative")
        child = np.random.SeedSequence(seed).generate_state(max(3 * depth, 1))
        agg, fus, align = [], [], []
        in_dim = state_dim + (3 if extended else 0)
        for k in range(depth):
            agg.append(DenseStack.seeded((in_dim, hidden_dim), int(child[3 * k]), ["none"]))
            fus.append(
                DenseStack.seeded((hidden_dim, state_dim), int(child[3 * k + 1]), ["relu"])
            )
            if extended:
                align.append(
                    DenseStack.seeded((state_dim, 3), int(child[3 * k + 2]), ["none"])
                )
        return cls(agg, fus, align if extended else None)

    def validate_for(self, state_dim: int, extended: bool) -> None:
        """Check that all stack widths chain for the given state width."""
        expect_in = state_dim + (3 if extended else 0)
        if extended and self.align_stacks is None:
            raise ValueError("extended updates need alignment stacks")
        for k in range(self.depth):
            agg, fus = self.agg_stacks[k], self.fus_stacks[k]
            if agg.in_dim != expect_in:
                raise ValueError(
                    f"iteration {k}: aggregation input {agg.in_dim} != expected {expect_in}"
                )
            if fus.in_dim != agg.out_dim or fus.out_dim != state_dim:
                raise ValueError(
                    f"iteration {k}: fusion widths {fus.in_dim}->{fus.out_dim} do not chain"
                )
            if extended:
                align = self.align_stacks[k]
                if align.in_dim != state_dim or align.out_dim != 3:
                    raise ValueError(
                        f"iteration {k}: alignment widths {align.in_dim}->{align.out_dim}"
                    )

    def copy(self) -> "GraphUpdater":
        return GraphUpdater(
            [s.copy() for s in self.agg_stacks],
            [s.copy() for s in self.fus_stacks],
            None if self.align_stacks is None else [s.copy() for s in self.align_stacks],
        )

    def zero_grads(self) -> "UpdaterGrads":
        return UpdaterGrads(
            [s.zero_grads() for s in self.agg_stacks],
            [s.zero_grads() for s in self.fus_stacks],
            None
            if self.align_stacks is None
            else [s.zero_grads() for s in self.align_stacks],
        )

    def sgd_step(self, grads: "UpdaterGrads", lr: float) -> None:
        for stack, g in zip(self.agg_stacks, grads.agg):
            stack.sgd_step(g, lr)
        for stack, g in zip(self.fus_stacks, grads.fus):
            stack.sgd_step(g, lr)
        if self.align_stacks is not None and grads.align is not None:
            for stack, g in zip(self.align_stacks, grads.align):
                stack.sgd_step(g, lr)


@dataclass
class UpdaterGrads:
    """Gradients mirroring a :class:`GraphUpdater`'s stack structure."""

    agg: list[list[LayerGrads]]
    fus: list[list[LayerGrads]]
    align: list[list[LayerGrads]] | None = None


@dataclass
class _IterCache:
    prev: np.ndarray
    row_node: np.ndarray
    row_neigh: np.ndarray
    agg_cache: list
    fus_cache: list
    argmax_rows: np.ndarray  # (n, D) absolute row index feeding each pooled channel
    pool_inputs: np.ndarray  # (rows, D) transformed neighbour features
    align_cache: list | None
    align_out: np.ndarray | None


@dataclass
class UpdateCache:
    """Everything the backward pass needs from one forward update."""

    graph: NeighborhoodGraph
    updater: GraphUpdater
    extended: bool
    iterations: list[_IterCache]
    out: np.ndarray


def _update_forward(
    graph: NeighborhoodGraph, updater: GraphUpdater, extended: bool
) -> tuple[np.ndarray, UpdateCache]:
    if len(graph):
        updater.validate_for(graph.state_dim, extended)
    h = graph.states_matrix()
    n = len(graph)
    coords = graph.coords_matrix()
    row_node = np.concatenate(
        [np.full(len(a), i, dtype=np.int64) for i, a in enumerate(graph.adjacency)]
    ) if n else np.empty(0, dtype=np.int64)
    row_neigh = np.concatenate(
        [np.asarray(a, dtype=np.int64) for a in graph.adjacency]
    ) if n else np.empty(0, dtype=np.int64)
    starts = np.zeros(n + 1, dtype=np.int64)
    if n:
        starts[1:] = np.cumsum([len(a) for a in graph.adjacency])

    iterations: list[_IterCache] = []
    for k in range(updater.depth):
        if n == 0:
            break
        prev = h
        align_cache = align_out = None
        if extended:
            align_out, align_cache = updater.align_stacks[k].forward(prev)
            offsets = coords[row_node] - coords[row_neigh] - align_out[row_node]
            rows = np.concatenate([offsets, prev[row_neigh]], axis=1)
        else:
            rows = prev[row_neigh]
        pooled_in, agg_cache = updater.agg_stacks[k].forward(rows)
        d = pooled_in.shape[1]
        pooled = np.empty((n, d))
        argmax_rows = np.empty((n, d), dtype=np.int64)
        for i in range(n):
            block = pooled_in[starts[i] : starts[i + 1]]
            local = block.argmax(axis=0)  # lowest row index wins exact ties
            argmax_rows[i] = starts[i] + local
            pooled[i] = block[local, np.arange(d)]
        fused, fus_cache = updater.fus_stacks[k].forward(pooled)
        h = prev + fused
        iterations.append(
            _IterCache(
                prev=prev,
                row_node=row_node,
                row_neigh=row_neigh,
                agg_cache=agg_cache,
                fus_cache=fus_cache,
                argmax_rows=argmax_rows,
                pool_inputs=pooled_in,
                align_cache=align_cache,
                align_out=align_out,
            )
        )
    return h, UpdateCache(graph, updater, extended, iterations, h)


def update_vanilla(graph: NeighborhoodGraph, updater: GraphUpdater) -> np.ndarray:
    """Run the state-only refinement; returns the (n, F) refined states."""
    return _update_forward(graph, updater, extended=False)[0]


def update_extended(graph: NeighborhoodGraph, updater: GraphUpdater) -> np.ndarray:
    """Run the offset-aligned refinement; returns the (n, F) refined states."""
    return _update_forward(graph, updater, extended=True)[0]


def update_vanilla_forward(
    graph: NeighborhoodGraph, updater: GraphUpdater
) -> tuple[np.ndarray, UpdateCache]:
    return _update_forward(graph, updater, extended=False)


def update_extended_forward(
    graph: NeighborhoodGraph, updater: GraphUpdater
) -> tuple[np.ndarray, UpdateCache]:
    return _update_forward(graph, updater, extended=True)


def update_backward(
    cache: UpdateCache, grad_out: np.ndarray
) -> tuple[UpdaterGrads, np.ndarray]:
    """Back-propagate through a cached update.

    ``grad_out`` is d(loss)/d(refined states), shape (n, F).  Returns the
    accumulated stack gradients and d(loss)/d(initial states).  Max-pool
    gradients flow only to the winning neighbour row per channel (the
    lowest row on exact forward ties).
    """
    updater = cache.updater
    grads = updater.zero_grads()
    dh = np.asarray(grad_out, dtype=float).copy()
    for k in range(len(cache.iterations) - 1, -1, -1):
        it = cache.iterations[k]
        n, d = it.argmax_rows.shape
        fus_grads, d_pooled = updater.fus_stacks[k].backward(it.fus_cache, dh)
        grads.fus[k] = add_layer_grads(grads.fus[k], fus_grads)

        d_pool_in = np.zeros_like(it.pool_inputs)
        cols = np.broadcast_to(np.arange(d), (n, d))
        np.add.at(d_pool_in, (it.argmax_rows, cols), d_pooled)

        agg_grads, d_rows = updater.agg_stacks[k].backward(it.agg_cache, d_pool_in)
        grads.agg[k] = add_layer_grads(grads.agg[k], agg_grads)

        d_prev = dh  # residual connection passes the gradient straight through
        if cache.extended:
            d_offsets = d_rows[:, :3]
            d_states = d_rows[:, 3:]
            np.add.at(d_prev, it.row_neigh, d_states)
            d_align = np.zeros((n, 3))
            np.add.at(d_align, it.row_node, -d_offsets)
            align_grads, d_prev_align = updater.align_stacks[k].backward(
                it.align_cache, d_align
            )
            grads.align[k] = add_layer_grads(grads.align[k], align_grads)
            d_prev = d_prev + d_prev_align
        else:
            np.add.at(d_prev, it.row_neigh, d_rows)
        dh = d_prev
    return grads, dh


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def header_forward(
    states: np.ndarray, cls_stack: DenseStack, reg_stack: DenseStack
) -> tuple[np.ndarray, np.ndarray, tuple]:
    """Score and regress every node state.

    Returns sigmoid class scores (n,), box residuals (n, 7), and a cache
    for :func:`header_backward`.
    """
    if cls_stack.out_dim != 1:
        raise ValueError("classification stack must end in one unit")
    if reg_stack.out_dim != 7:
        raise ValueError("regression stack must end in seven units")
    z = np.asarray(states, dtype=float)
    logits, cls_cache = cls_stack.forward(z)
    residuals, reg_cache = reg_stack.forward(z)
    scores = _sigmoid(logits[:, 0])
    return scores, residuals, (cls_cache, reg_cache, scores)


def header_backward(
    cache: tuple,
    cls_stack: DenseStack,
    reg_stack: DenseStack,
    d_scores: np.ndarray,
    d_residuals: np.ndarray,
) -> tuple[list[LayerGrads], list[LayerGrads], np.ndarray]:
    """Gradients of the header outputs back to stacks and states."""
    cls_cache, reg_cache, scores = cache
    d_logits = (np.asarray(d_scores, dtype=float) * scores * (1.0 - scores))[:, None]
    cls_grads, dz_cls = cls_stack.backward(cls_cache, d_logits)
    reg_grads, dz_reg = reg_stack.backward(reg_cache, np.asarray(d_residuals, dtype=float))
    return cls_grads, reg_grads, dz_cls + dz_reg


def graph_header(
    state: np.ndarray, cls_stack: DenseStack, reg_stack: DenseStack
) -> tuple[float, np.ndarray]:
    """Single-node header: (sigmoid score, 7 box residuals)."""
    scores, residuals, _ = header_forward(
        np.asarray(state, dtype=float)[None, :], cls_stack, reg_stack
    )
    return float(scores[0]), residuals[0]


def refine_proposals(
    graph: NeighborhoodGraph,
    refined_states: np.ndarray,
    cls_stack: DenseStack,
    reg_stack: DenseStack,
) -> list[Box3D]:
    """Decode headed residuals against each node's own proposal box."""
    if len(graph) == 0:
        return []
    scores, residuals, _ = header_forward(refined_states, cls_stack, reg_stack)
    out = []
    for i, node in enumerate(graph.nodes):
        if node.box is None:
            raise ValueError(f"node {i} carries no proposal box to refine")
        out.append(
            decode_box(residuals[i], node.box, score=float(scores[i]), class_id=node.box.class_id)
        )
    return out
