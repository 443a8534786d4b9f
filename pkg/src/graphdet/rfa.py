"""Region feature aggregation: per-proposal descriptors from three sources.

Every proposal gathers a voxel component (sparse voxel features
interpolated through the raw cloud onto the proposal centre), a pixel
component (a rotated probe grid over a BEV feature map), and a point
component (a small farthest-point-sampled set-abstraction pyramid).  The
three vectors concatenate, in that order, into the node state used by the
graph refiner.  Synthetic smooth feature fields stand in for a learned
backbone so the whole path stays deterministic and cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import points_in_box
from .interp import (
    BevFeatureMap,
    FeatureSet,
    farthest_point_sample,
    propagate_features,
    sample_bev_grid,
    set_abstraction,
)
from .nnet import DenseStack
from .scene import Box3D, PointCloud
from .voxel import SparseVoxelGrid, restore_centroids


@dataclass(frozen=True)
class RfaConfig:
    """Widths and grouping scales of the three feature components.

    ``keypoint_counts`` and ``radii`` configure the point pyramid: each
    level samples that many keypoints (clamped to the available points)
    and groups at two radii whose set-abstraction outputs concatenate.
    ``point_dim`` must equal the concatenated output width of the last
    level's two MLPs.
    """

    m1: int = 2
    m2: int = 2
    voxel_dim: int = 8
    point_dim: int = 8
    keypoint_counts: tuple[int, ...] = (4096, 1024, 256)
    radii: tuple[tuple[float, float], ...] = ((0.1, 0.5), (0.5, 1.0), (1.0, 2.0))

    def __post_init__(self) -> None:
        if self.m1 < 1 or self.m2 < 1:
            raise ValueError("probe grid shape must be positive")
        if self.voxel_dim < 1 or self.point_dim < 1:
            raise ValueError("component widths must be positive")
        if len(self.keypoint_counts) != len(self.radii):
            raise ValueError("one radius pair per pyramid level is required")
        if any(k < 1 for k in self.keypoint_counts):
            raise ValueError("keypoint counts must be positive")
        for r1, r2 in self.radii:
            if r1 <= 0 or r2 <= 0:
                raise ValueError("grouping radii must be positive")

    @property
    def pixel_dim(self) -> int:
        return self.m1 * self.m2

    @property
    def feature_dim(self) -> int:
        """Width of the assembled node state."""
        return self.voxel_dim + self.pixel_dim + self.point_dim

    @property
    def levels(self) -> int:
        return len(self.keypoint_counts)


@dataclass(frozen=True)
class RoiRepresentation:
    """A proposal's assembled descriptor and its centroid."""

    centroid: np.ndarray  # (3,)
    feature: np.ndarray  # (feature_dim,)

    def __post_init__(self) -> None:
        centroid = np.asarray(self.centroid, dtype=float).reshape(3).copy()
        feature = np.asarray(self.feature, dtype=float).reshape(-1).copy()
        if not (np.all(np.isfinite(centroid)) and np.all(np.isfinite(feature))):
            raise ValueError("RoI representation must be finite")
        centroid.setflags(write=False)
        feature.setflags(write=False)
        object.__setattr__(self, "centroid", centroid)
        object.__setattr__(self, "feature", feature)


def synthetic_voxel_features(positions: np.ndarray, dim: int, seed: int) -> np.ndarray:
    """A smooth deterministic feature field evaluated at given positions.

    Channels are sinusoids of seeded random frequency and phase, so the
    field is scene-independent, infinitely smooth, and reproducible.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    freq = rng.normal(0.0, 0.6, size=(dim, 3))
    phase = rng.uniform(0.0, 2.0 * math.pi, size=dim)
    return np.sin(positions @ freq.T + phase)


def synthetic_bev_map(
    rows: int,
    cols: int,
    channels: int,
    cell_size: float,
    origin: tuple[float, float],
    seed: int,
) -> BevFeatureMap:
    """Rasterise the smooth synthetic field over a BEV grid."""
    ys = origin[1] + (np.arange(rows) + 0.5) * cell_size
    xs = origin[0] + (np.arange(cols) + 0.5) * cell_size
    gx, gy = np.meshgrid(xs, ys)  # (rows, cols)
    flat = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    values = synthetic_voxel_features(flat, channels, seed)
    return BevFeatureMap(values.reshape(rows, cols, channels), cell_size, origin)


def voxel_feature_set(grid: SparseVoxelGrid, dim: int, seed: int) -> FeatureSet:
    """Voxel centroids paired with the synthetic field sampled there."""
    centroids = restore_centroids(grid)
    if not centroids:
        return FeatureSet(np.empty((0, 3)), np.empty((0, dim)))
    positions = np.stack([c for c, _ in centroids])
    return FeatureSet(positions, synthetic_voxel_features(positions, dim, seed))


def voxel_component(
    grid: SparseVoxelGrid,
    voxel_features: FeatureSet,
    cloud: PointCloud,
    proposal: Box3D,
) -> np.ndarray:
    """Interpolate voxel features through the raw cloud onto the proposal centre.

    Two propagation hops: voxel centroids onto the cloud points, then the
    per-point features onto the proposal centroid.  Empty voxel features
    or an empty cloud are errors.
    """
    del grid  # geometry already captured by the centroid positions
    per_point = propagate_features(voxel_features, cloud.xyz)
    centre = np.asarray(proposal.center, dtype=float)[None, :]
    return propagate_features(per_point, centre).features[0]


def pixel_component(
    bev: BevFeatureMap, proposal: Box3D, config: RfaConfig, mode: str = "bilinear"
) -> np.ndarray:
    """Probe the BEV map over the proposal footprint (m1 x m2 grid)."""
    return sample_bev_grid(bev, proposal, config.m1, config.m2, mode=mode)


def point_pyramid(
    cloud: PointCloud,
    config: RfaConfig,
    stacks: list[tuple[DenseStack, DenseStack]],
) -> FeatureSet:
    """The shared keypoint pyramid feeding every proposal's point component.

    Level-zero input features are the per-point reflectance; positions
    enter only through the relative offsets inside set abstraction, so
    the pyramid describes local point-pattern shape rather than absolute
    placement.  Each level farthest-point-samples its keypoints (clamped
    to the available count, starting from index 0), applies set
    abstraction at the two configured radii, and concatenates the pooled
    outputs into the next level's features.
    """
    if len(stacks) != config.levels:
        raise ValueError(f"expected {config.levels} stack pairs, got {len(stacks)}")
    if len(cloud) == 0:
        raise ValueError("point component needs a non-empty cloud")
    current = FeatureSet(cloud.xyz, cloud.reflectance[:, None])
    for level, ((r1, r2), (mlp1, mlp2)) in enumerate(zip(config.radii, stacks)):
        k = min(config.keypoint_counts[level], len(current))
        centres = current.positions[farthest_point_sample(current.positions, k, 0)]
        grouped1 = set_abstraction(current, centres, r1, mlp1)
        grouped2 = set_abstraction(current, centres, r2, mlp2)
        current = FeatureSet(
            centres, np.concatenate([grouped1.features, grouped2.features], axis=1)
        )
    if current.dim != config.point_dim:
        raise ValueError(
            f"point pyramid produced width {current.dim}, config expects {config.point_dim}"
        )
    return current


def point_component(
    cloud: PointCloud,
    proposal: Box3D,
    config: RfaConfig,
    stacks: list[tuple[DenseStack, DenseStack]],
) -> np.ndarray:
    """Interpolate the point pyramid's top level onto the proposal centroid."""
    pyramid = point_pyramid(cloud, config, stacks)
    centre = np.asarray(proposal.center, dtype=float)[None, :]
    return propagate_features(pyramid, centre).features[0]


def default_point_stacks(config: RfaConfig, seed: int, hidden: int = 16) -> list[tuple[DenseStack, DenseStack]]:
    """Seeded two-layer MLP pairs whose widths chain through the pyramid.

    Each level's two branches output ``point_dim // 2`` channels so the
    final concatenation matches ``config.point_dim`` (which must be even).
    """
    if config.point_dim % 2 != 0:
        raise ValueError("point_dim must be even to split across two radii")
    half = config.point_dim // 2
    child = np.random.SeedSequence(seed).generate_state(2 * config.levels)
    stacks = []
    in_dim = 1 + 3  # reflectance plus relative offset
    for level in range(config.levels):
        mlp1 = DenseStack.seeded((in_dim, hidden, half), int(child[2 * level]))
        mlp2 = DenseStack.seeded((in_dim, hidden, half), int(child[2 * level + 1]))
        stacks.append((mlp1, mlp2))
        in_dim = 2 * half + 3
    return stacks


def assemble(
    centroid: np.ndarray,
    voxel_vec: np.ndarray,
    pixel_vec: np.ndarray,
    point_vec: np.ndarray,
) -> RoiRepresentation:
    """Concatenate the three components (voxel, pixel, point) into one state."""
    feature = np.concatenate(
        [
            np.asarray(voxel_vec, dtype=float).ravel(),
            np.asarray(pixel_vec, dtype=float).ravel(),
            np.asarray(point_vec, dtype=float).ravel(),
        ]
    )
    return RoiRepresentation(np.asarray(centroid, dtype=float), feature)


def build_roi_representation(
    grid: SparseVoxelGrid,
    voxel_features: FeatureSet,
    bev: BevFeatureMap,
    cloud: PointCloud,
    proposal: Box3D,
    config: RfaConfig,
    point_stacks: list[tuple[DenseStack, DenseStack]],
) -> RoiRepresentation:
    """All three components for one proposal, assembled."""
    return assemble(
        np.asarray(proposal.center, dtype=float),
        voxel_component(grid, voxel_features, cloud, proposal),
        pixel_component(bev, proposal, config),
        point_component(cloud, proposal, config, point_stacks),
    )


def auxiliary_targets(
    cloud: PointCloud, gt_boxes: list[Box3D] | tuple[Box3D, ...]
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point supervision targets: foreground mask and centre offsets.

    A point is foreground when it lies inside any ground-truth box
    (face-inclusive).  Its offset target is ``box centre - point`` for the
    first containing box in list order; background points get zeros.
    """
    n = len(cloud)
    mask = np.zeros(n, dtype=bool)
    offsets = np.zeros((n, 3))
    xyz = cloud.xyz
    for box in gt_boxes:
        inside = points_in_box(xyz, box) & ~mask
        if np.any(inside):
            offsets[inside] = np.array(box.center) - xyz[inside]
            mask |= inside
    return mask, offsets
