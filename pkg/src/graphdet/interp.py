"""Point-set operators: farthest point sampling, feature propagation,
radius set abstraction, and bilinear BEV sampling.

These are the building blocks that move features between irregular point
sets and regular maps: interpolation weighs the three nearest sources by
inverse squared distance, set abstraction max-pools a pointwise MLP over
a radius neighbourhood, and BEV sampling reads a rotated grid of probes
out of a 2D feature map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nnet import DenseStack
from .scene import Box3D

_EPS = 1e-8  # inverse-distance regulariser


@dataclass(frozen=True)
class FeatureSet:
    """Positions with aligned feature vectors.

    ``positions`` is (n, 3) and ``features`` (n, d); rows correspond.
    Both arrays are copied and frozen at construction.
    """

    positions: np.ndarray
    features: np.ndarray

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=float)
        feat = np.asarray(self.features, dtype=float)
        if pos.size == 0:
            pos = pos.reshape(0, 3)
        if feat.size == 0:
            feat = feat.reshape(0, feat.shape[-1] if feat.ndim == 2 else 0)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (n, 3), got {pos.shape}")
        if feat.ndim != 2 or feat.shape[0] != pos.shape[0]:
            raise ValueError(
                f"features must align with positions, got {feat.shape} vs {pos.shape}"
            )
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(feat))):
            raise ValueError("feature set contains non-finite values")
        pos, feat = pos.copy(), feat.copy()
        pos.setflags(write=False)
        feat.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feat)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class BevFeatureMap:
    """A dense bird's-eye-view feature raster.

    ``grid`` has shape (rows, cols, channels); rows stride the y axis and
    columns the x axis.  Cell (r, c) is centred at
    ``origin + ((c + 0.5) * cell_size, (r + 0.5) * cell_size)``.
    """

    grid: np.ndarray
    cell_size: float
    origin: tuple[float, float]

    def __post_init__(self) -> None:
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != 3:
            raise ValueError(f"grid must be (rows, cols, channels), got {grid.shape}")
        if self.cell_size <= 0 or not math.isfinite(self.cell_size):
            raise ValueError("cell_size must be a positive real")
        if not np.all(np.isfinite(grid)):
            raise ValueError("feature map contains non-finite values")
        grid = grid.copy()
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def channels(self) -> int:
        return self.grid.shape[2]


def farthest_point_sample(positions: np.ndarray, k: int, start_index: int = 0) -> list[int]:
    """Greedy farthest point sampling.

    Starting from ``start_index``, repeatedly picks the point whose
    distance to the chosen set is largest; exact distance ties go to the
    lowest index.  Raises ValueError when ``k`` exceeds the number of
    points.
    """
    pos = np.asarray(positions, dtype=float)
    n = pos.shape[0]
    if k > n:
        raise ValueError(f"cannot sample {k} points from {n}")
    if k <= 0:
        return []
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range for {n} points")
    chosen = [int(start_index)]
    # Squared distances preserve the greedy ordering and avoid square roots.
    min_d2 = ((pos - pos[start_index]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(min_d2))  # first maximum = lowest index on ties
        chosen.append(nxt)
        d2 = ((pos - pos[nxt]) ** 2).sum(axis=1)
        min_d2 = np.minimum(min_d2, d2)
    return chosen


def _nearest_rows(d2: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest entries per row, stable on ties."""
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def propagate_features(source: FeatureSet, query_positions: np.ndarray) -> FeatureSet:
    """Interpolate source features onto query positions.

    Each query takes an inverse-squared-distance weighted average of its
    three nearest sources (all of them when fewer than three exist);
    weights are ``1 / (d^2 + 1e-8)``, normalised per query.  An empty
    source set is an error.
    """
    if len(source) == 0:
        raise ValueError("cannot propagate from an empty feature set")
    queries = np.asarray(query_positions, dtype=float)
    if queries.size == 0:
        return FeatureSet(np.empty((0, 3)), np.empty((0, source.dim)))
    if queries.ndim != 2 or queries.shape[1] != 3:
        raise ValueError(f"query positions must be (m, 3), got {queries.shape}")

    k = min(3, len(source))
    diff = queries[:, None, :] - source.positions[None, :, :]
    d2 = (diff**2).sum(axis=2)
    nn = _nearest_rows(d2, k)
    rows = np.arange(len(queries))[:, None]
    inv = 1.0 / (d2[rows, nn] + _EPS)
    weights = inv / inv.sum(axis=1, keepdims=True)
    gathered = source.features[nn]  # (m, k, d)
    out = (gathered * weights[:, :, None]).sum(axis=1)
    return FeatureSet(queries, out)


def set_abstraction(
    source: FeatureSet,
    centers: np.ndarray,
    radius: float,
    mlp: DenseStack,
) -> FeatureSet:
    """Radius-grouped pointwise MLP with channel-wise max pooling.

    For every centre, gathers source points within ``radius`` (inclusive),
    appends each point's offset from the centre to its feature, pushes the
    rows through ``mlp``, and max-pools per channel.  Empty neighbourhoods
    yield a zero vector, and points beyond the radius can never change the
    output.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    centers = np.asarray(centers, dtype=float)
    if centers.size == 0:
        return FeatureSet(np.empty((0, 3)), np.empty((0, mlp.out_dim)))
    if centers.ndim != 2 or centers.shape[1] != 3:
        raise ValueError(f"centers must be (m, 3), got {centers.shape}")
    if mlp.in_dim != source.dim + 3:
        raise ValueError(
            f"mlp expects {mlp.in_dim} inputs but grouped features have {source.dim + 3}"
        )

    r2 = radius * radius
    out = np.zeros((len(centers), mlp.out_dim))
    for m, centre in enumerate(centers):
        d2 = ((source.positions - centre) ** 2).sum(axis=1)
        mask = d2 <= r2
        if not np.any(mask):
            continue
        grouped = np.concatenate(
            [source.features[mask], source.positions[mask] - centre], axis=1
        )
        out[m] = mlp.apply(grouped).max(axis=0)
    return FeatureSet(centers, out)


def sample_bev_point(bev: BevFeatureMap, x: float, y: float, mode: str = "bilinear") -> np.ndarray:
    """Sample all map channels at one continuous position.

    ``bilinear`` blends the four surrounding cell centres with zero
    padding outside the raster; ``nearest`` snaps to the closest cell.
    """
    rows, cols, channels = bev.grid.shape
    gc = (x - bev.origin[0]) / bev.cell_size - 0.5  # column coordinate
    gr = (y - bev.origin[1]) / bev.cell_size - 0.5  # row coordinate
    if mode == "nearest":
        r, c = round(gr), round(gc)
        if 0 <= r < rows and 0 <= c < cols:
            return bev.grid[int(r), int(c)].copy()
        return np.zeros(channels)
    if mode != "bilinear":
        raise ValueError(f"unknown sampling mode {mode!r}")
    r0, c0 = math.floor(gr), math.floor(gc)
    tr, tc = gr - r0, gc - c0
    out = np.zeros(channels)
    for dr, wr in ((0, 1.0 - tr), (1, tr)):
        for dc, wc in ((0, 1.0 - tc), (1, tc)):
            r, c = r0 + dr, c0 + dc
            weight = wr * wc
            if weight != 0.0 and 0 <= r < rows and 0 <= c < cols:
                out += weight * bev.grid[r, c]
    return out


def sample_bev_grid(
    bev: BevFeatureMap,
    proposal: Box3D,
    m1: int,
    m2: int,
    mode: str = "bilinear",
) -> np.ndarray:
    """Read an m1 x m2 probe grid out of a proposal's rotated footprint.

    Probe (i, j) sits at the centre of sub-cell (i, j) of the footprint,
    with i striding the length axis and j the width axis, and reads map
    channel ``i * m2 + j``.  The map must therefore carry at least
    ``m1 * m2`` channels; probes falling off the raster read zero.
    """
    if m1 < 1 or m2 < 1:
        raise ValueError("grid shape must be positive")
    needed = m1 * m2
    if bev.channels < needed:
        raise ValueError(
            f"feature map has {bev.channels} channels but the {m1}x{m2} grid needs {needed}"
        )
    l, w, _ = proposal.dims
    c, s = math.cos(proposal.yaw), math.sin(proposal.yaw)
    out = np.empty(needed)
    for i in range(m1):
        lx = ((i + 0.5) / m1 - 0.5) * l
        for j in range(m2):
            ly = ((j + 0.5) / m2 - 0.5) * w
            x = proposal.center[0] + c * lx - s * ly
            y = proposal.center[1] + s * lx + c * ly
            g = i * m2 + j
            out[g] = sample_bev_point(bev, x, y, mode=mode)[g]
    return out
