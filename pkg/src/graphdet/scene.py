"""Scene primitives: point clouds, oriented 3D boxes, synthetic scenes, and text I/O.

Coordinates follow the usual lidar convention: x forward, y left, z up,
yaw measured counter-clockwise from +x in the ground plane.  Scene extents
are half-open intervals ``[min, max)`` on every axis so that points and
voxel indices partition cleanly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

# Default detection range, metres: ((x_min, x_max), (y_min, y_max), (z_min, z_max)).
KITTI_RANGE = ((0.0, 70.4), (-40.0, 40.0), (-3.0, 1.0))

# Default object prior (length, width, height), metres.
CAR_DIMS = (3.9, 1.6, 1.56)

_CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")
_UNKNOWN_CLASS = "Unknown"

RangeBounds = tuple[tuple[float, float], tuple[float, float], tuple[float, float]]


class DetectionParseError(ValueError):
    """Raised when a detection text file cannot be parsed."""


def normalize_yaw(theta: float) -> float:
    """Wrap an angle in radians into the interval (-pi, pi]."""
    wrapped = theta % (2.0 * math.pi)  # in [0, 2*pi)
    if wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Box3D:
    """An oriented 3D bounding box.

    Attributes:
        center: (cx, cy, cz) box centre in metres.
        dims: (length, width, height); length runs along the heading axis.
        yaw: heading angle, normalised to (-pi, pi] on construction.
        score: optional detection confidence in [0, 1]; ``None`` for ground truth.
        class_id: optional integer class label.
    """

    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float
    score: float | None = None
    class_id: int | None = None

    def __post_init__(self) -> None:
        center = tuple(float(v) for v in self.center)
        dims = tuple(float(v) for v in self.dims)
        if len(center) != 3 or len(dims) != 3:
            raise ValueError("center and dims must have three components")
        if not all(math.isfinite(v) for v in center + dims + (self.yaw,)):
            raise ValueError("box parameters must be finite")
        if any(d <= 0.0 for d in dims):
            raise ValueError(f"box dims must be positive, got {dims}")
        if self.score is not None:
            s = float(self.score)
            if not math.isfinite(s) or not 0.0 <= s <= 1.0:
                raise ValueError(f"score must lie in [0, 1], got {self.score}")
            object.__setattr__(self, "score", s)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    @property
    def bev_diagonal(self) -> float:
        """Diagonal of the box footprint, sqrt(l^2 + w^2)."""
        return math.hypot(self.dims[0], self.dims[1])

    @property
    def volume(self) -> float:
        l, w, h = self.dims
        return l * w * h

    def z_interval(self) -> tuple[float, float]:
        """Vertical extent (bottom, top) spanned by the box."""
        half = 0.5 * self.dims[2]
        return self.center[2] - half, self.center[2] + half

    def corners_bev(self) -> np.ndarray:
        """Footprint corners as a (4, 2) array in counter-clockwise order."""
        l, w, _ = self.dims
        local = np.array(
            [
                [0.5 * l, 0.5 * w],
                [-0.5 * l, 0.5 * w],
                [-0.5 * l, -0.5 * w],
                [0.5 * l, -0.5 * w],
            ]
        )
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])

    def corners_3d(self) -> np.ndarray:
        """All eight corners as an (8, 3) array, bottom face first."""
        bev = self.corners_bev()
        bottom, top = self.z_interval()
        lower = np.column_stack([bev, np.full(4, bottom)])
        upper = np.column_stack([bev, np.full(4, top)])
        return np.vstack([lower, upper])

    def as_vector(self) -> np.ndarray:
        """The (cx, cy, cz, l, w, h, yaw) parameter vector."""
        return np.array([*self.center, *self.dims, self.yaw])

    def with_score(self, score: float | None) -> "Box3D":
        return replace(self, score=score)


@dataclass(frozen=True)
class PointCloud:
    """An immutable set of lidar returns stored as an (N, 4) array.

    Columns are x, y, z, reflectance.  The backing array is marked
    read-only; make a copy before mutating.
    """

    points: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.points, dtype=float)
        if arr.size == 0:
            arr = arr.reshape(0, 4)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValueError(f"expected an (N, 4) point array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("point cloud contains non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "points", arr)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.points[:, 3]


def _check_bounds(range_bounds: RangeBounds) -> RangeBounds:
    bounds = tuple((float(lo), float(hi)) for lo, hi in range_bounds)
    if len(bounds) != 3:
        raise ValueError("range_bounds needs one (min, max) pair per axis")
    for axis, (lo, hi) in enumerate(bounds):
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
            raise ValueError(f"range_bounds axis {axis} is not well-ordered: ({lo}, {hi})")
    return bounds  # type: ignore[return-value]


@dataclass(frozen=True)
class Scene:
    """A point cloud together with its ground-truth boxes and valid range.

    Every ground-truth centre must lie inside ``range_bounds`` (half-open
    per axis); construction fails otherwise.
    """

    cloud: PointCloud
    gt_boxes: tuple[Box3D, ...]
    range_bounds: RangeBounds = KITTI_RANGE

    def __post_init__(self) -> None:
        bounds = _check_bounds(self.range_bounds)
        boxes = tuple(self.gt_boxes)
        for i, box in enumerate(boxes):
            for axis in range(3):
                lo, hi = bounds[axis]
                if not (lo <= box.center[axis] < hi):
                    raise ValueError(
                        f"gt box {i} centre {box.center} falls outside range axis {axis}"
                    )
        object.__setattr__(self, "gt_boxes", boxes)
        object.__setattr__(self, "range_bounds", bounds)


def _sample_surface_points(rng: np.random.Generator, box: Box3D, count: int) -> np.ndarray:
    """Draw points uniformly on the faces of ``box``, weighted by face area."""
    l, w, h = box.dims
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=count)
    v = rng.uniform(-0.5, 0.5, size=count)

    local = np.empty((count, 3))
    for face, (ax, sign) in enumerate([(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]):
        mask = faces == face
        if not np.any(mask):
            continue
        if ax == 0:  # +-x end caps
            local[mask, 0] = sign * 0.5 * l
            local[mask, 1] = u[mask] * w
            local[mask, 2] = v[mask] * h
        elif ax == 1:  # +-y sides
            local[mask, 0] = u[mask] * l
            local[mask, 1] = sign * 0.5 * w
            local[mask, 2] = v[mask] * h
        else:  # top and bottom
            local[mask, 0] = u[mask] * l
            local[mask, 1] = v[mask] * w
            local[mask, 2] = sign * 0.5 * h

    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.center[0]
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.center[1]
    world[:, 2] = local[:, 2] + box.center[2]
    return world


def generate_synthetic_scene(
    seed: int,
    n_objects: int,
    points_per_object: int,
    clutter_points: int,
    range_bounds: RangeBounds = KITTI_RANGE,
    object_dims: tuple[float, float, float] = CAR_DIMS,
    min_separation: float = 6.0,
) -> Scene:
    """Build a reproducible scene of box-shaped objects plus uniform clutter.

    Objects are car-sized by default, placed with rejection sampling so
    footprints stay separated by ``min_separation`` metres in the ground
    plane, and skinned with surface points.  Clutter points are uniform
    over the range.  Identical arguments produce byte-identical scenes.

    The cloud lists object points first (object 0, object 1, ...) followed
    by the clutter block; total size is
    ``n_objects * points_per_object + clutter_points``.
    """
    if n_objects < 0 or points_per_object < 0 or clutter_points < 0:
        raise ValueError("scene sizes must be non-negative")
    bounds = _check_bounds(range_bounds)
    rng = np.random.default_rng(seed)

    l, w, h = object_dims
    margin = 0.5 * math.hypot(l, w) + 0.5
    (x_lo, x_hi), (y_lo, y_hi), (z_lo, z_hi) = bounds
    if n_objects > 0 and (x_hi - x_lo <= 2 * margin or y_hi - y_lo <= 2 * margin):
        raise ValueError("range too small to place objects")
    z_centre_lo = z_lo + 0.5 * h + 0.05
    z_centre_hi = min(z_hi - 0.5 * h, z_centre_lo + 1.0)
    if z_centre_hi <= z_centre_lo:
        z_centre_hi = z_centre_lo + 1e-6

    centres: list[tuple[float, float, float]] = []
    boxes: list[Box3D] = []
    for _ in range(n_objects):
        placed = False
        for _attempt in range(200):
            cx = rng.uniform(x_lo + margin, x_hi - margin)
            cy = rng.uniform(y_lo + margin, y_hi - margin)
            if all(math.hypot(cx - px, cy - py) >= min_separation for px, py, _ in centres):
                placed = True
                break
        # After 200 tries accept the last draw; only dense configurations get here.
        cz = rng.uniform(z_centre_lo, z_centre_hi)
        yaw = rng.uniform(-math.pi, math.pi)
        centres.append((cx, cy, cz))
        boxes.append(Box3D((cx, cy, cz), object_dims, yaw, class_id=0))
        del placed

    blocks: list[np.ndarray] = []
    for box in boxes:
        xyz = _sample_surface_points(rng, box, points_per_object)
        refl = rng.uniform(0.0, 1.0, size=points_per_object)
        blocks.append(np.column_stack([xyz, refl]))
    if clutter_points > 0:
        xyz = np.column_stack(
            [
                rng.uniform(x_lo, x_hi, size=clutter_points),
                rng.uniform(y_lo, y_hi, size=clutter_points),
                rng.uniform(z_lo, z_hi, size=clutter_points),
            ]
        )
        refl = rng.uniform(0.0, 1.0, size=clutter_points)
        blocks.append(np.column_stack([xyz, refl]))

    points = np.vstack(blocks) if blocks else np.empty((0, 4))
    return Scene(PointCloud(points), tuple(boxes), bounds)


def clip_to_range(scene: Scene) -> Scene:
    """Drop cloud points outside the scene range (half-open per axis).

    Ground-truth boxes are untouched; their centres are inside the range
    by the scene invariant.  Applying the clip twice is a no-op.
    """
    pts = scene.cloud.points
    keep = np.ones(len(pts), dtype=bool)
    for axis, (lo, hi) in enumerate(scene.range_bounds):
        keep &= (pts[:, axis] >= lo) & (pts[:, axis] < hi)
    return Scene(PointCloud(pts[keep]), scene.gt_boxes, scene.range_bounds)


def _class_name(class_id: int | None) -> str:
    if class_id is None:
        return _UNKNOWN_CLASS
    if 0 <= class_id < len(_CLASS_NAMES):
        return _CLASS_NAMES[class_id]
    return f"Class{class_id}"


def _class_id(name: str) -> int | None:
    if name in _CLASS_NAMES:
        return _CLASS_NAMES.index(name)
    if name.startswith("Class"):
        try:
            return int(name[5:])
        except ValueError:
            return None
    return None


def write_detections(path: str, boxes: Sequence[Box3D]) -> None:
    """Write boxes as ``class cx cy cz l w h yaw [score]`` lines.

    Floats are written with full round-trip precision.  The score column
    is omitted for boxes without one (ground truth).
    """
    lines = []
    for box in boxes:
        parts = [_class_name(box.class_id)]
        parts += [repr(float(v)) for v in (*box.center, *box.dims, box.yaw)]
        if box.score is not None:
            parts.append(repr(float(box.score)))
        lines.append(" ".join(parts))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")


def read_detections(path: str) -> list[Box3D]:
    """Parse a detection text file written by :func:`write_detections`.

    Blank lines are ignored.  A malformed line raises
    :class:`DetectionParseError` naming the 1-based line number.
    """
    boxes: list[Box3D] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) not in (8, 9):
                raise DetectionParseError(
                    f"{path}, line {lineno}: expected 8 or 9 fields, got {len(tokens)}"
                )
            try:
                values = [float(t) for t in tokens[1:]]
            except ValueError as exc:
                raise DetectionParseError(f"{path}, line {lineno}: {exc}") from exc
            if not all(math.isfinite(v) for v in values):
                raise DetectionParseError(f"{path}, line {lineno}: non-finite value")
            score = values[7] if len(values) == 8 else None
            try:
                boxes.append(
                    Box3D(
                        center=(values[0], values[1], values[2]),
                        dims=(values[3], values[4], values[5]),
                        yaw=values[6],
                        score=score,
                        class_id=_class_id(tokens[0]),
                    )
                )
            except ValueError as exc:
                raise DetectionParseError(f"{path}, line {lineno}: {exc}") from exc
    return boxes
