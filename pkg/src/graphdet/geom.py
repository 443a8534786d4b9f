"""Oriented-box geometry: overlap, suppression, anchors, and box coding.

BEV overlap of yaw-rotated rectangles is computed exactly with
Sutherland-Hodgman polygon clipping plus the shoelace formula; 3D IoU
extends it with the vertical interval overlap.  The module also carries
the anchor grid, IoU-threshold target assignment, the relative box
encoding used for regression, and global scene augmentation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scene import (
    CAR_DIMS,
    Box3D,
    PointCloud,
    RangeBounds,
    Scene,
    _check_bounds,
    normalize_yaw,
)

# Anchor match labels.
POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon given as an (n, 2) vertex array."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Clip ``subject`` against a convex counter-clockwise polygon ``clip``.

    Standard Sutherland-Hodgman sweep: the subject is cut by each clip
    edge's half-plane in turn.  Boundary points count as inside, so
    touching boxes produce a degenerate (zero-area) polygon rather than
    disappearing outright.
    """
    output = [tuple(p) for p in subject]
    n_clip = len(clip)
    for e in range(n_clip):
        if not output:
            break
        ax, ay = clip[e]
        bx, by = clip[(e + 1) % n_clip]
        ex_, ey_ = bx - ax, by - ay
        vertices = output
        output = []
        sx, sy = vertices[-1]
        s_side = ex_ * (sy - ay) - ey_ * (sx - ax)
        s_in = s_side >= 0.0
        for px, py in vertices:
            p_side = ex_ * (py - ay) - ey_ * (px - ax)
            p_in = p_side >= 0.0
            if p_in:
                if not s_in:
                    t = s_side / (s_side - p_side)
                    output.append((sx + t * (px - sx), sy + t * (py - sy)))
                output.append((px, py))
            elif s_in:
                t = s_side / (s_side - p_side)
                output.append((sx + t * (px - sx), sy + t * (py - sy)))
            sx, sy, s_in, s_side = px, py, p_in, p_side
    return np.array(output) if output else np.empty((0, 2))


def intersection_area_bev(a: Box3D, b: Box3D) -> float:
    """Footprint intersection area of two oriented boxes."""
    inter = clip_polygon(a.corners_bev(), b.corners_bev())
    return polygon_area(inter)


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    """Bird's-eye-view IoU of two yaw-rotated boxes, in [0, 1]."""
    area_a = a.dims[0] * a.dims[1]
    area_b = b.dims[0] * b.dims[1]
    inter = intersection_area_bev(a, b)
    inter = min(inter, area_a, area_b)  # clipping noise must not exceed either box
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: BEV intersection times vertical overlap over union."""
    bot_a, top_a = a.z_interval()
    bot_b, top_b = b.z_interval()
    dz = min(top_a, top_b) - max(bot_a, bot_b)
    if dz <= 0.0:
        return 0.0
    inter = intersection_area_bev(a, b) * dz
    inter = min(inter, a.volume, b.volume)
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def nms(
    boxes: Sequence[Box3D],
    iou_threshold: float = 0.1,
    score_threshold: float = 0.3,
) -> list[Box3D]:
    """Greedy non-maximum suppression on BEV IoU.

    Boxes scoring below ``score_threshold`` are dropped up front.  The
    rest are visited by descending score (ties by lower input index); a
    box is kept iff its IoU with every already-kept box is at most
    ``iou_threshold``.  The kept list comes back sorted by descending
    score.
    """
    for i, box in enumerate(boxes):
        if box.score is None:
            raise ValueError(f"box {i} has no score; NMS needs scored boxes")
    order = sorted(
        (i for i, b in enumerate(boxes) if b.score >= score_threshold),
        key=lambda i: (-boxes[i].score, i),
    )
    kept: list[Box3D] = []
    for i in order:
        candidate = boxes[i]
        suppressed = False
        for k in kept:
            # Footprints further apart than the summed half-diagonals cannot overlap.
            reachable = 0.5 * (candidate.bev_diagonal + k.bev_diagonal)
            dx = candidate.center[0] - k.center[0]
            dy = candidate.center[1] - k.center[1]
            if dx * dx + dy * dy > reachable * reachable:
                continue
            if rotated_iou_bev(candidate, k) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(candidate)
    return kept


@dataclass(frozen=True)
class AnchorConfig:
    """Layout of the fixed BEV anchor grid.

    ``bev_resolution`` is (rows, cols): rows stride the y extent, columns
    the x extent.  One anchor per configured yaw sits at every cell
    centre, at height ``z_center``.
    """

    dims: tuple[float, float, float] = CAR_DIMS
    yaws: tuple[float, ...] = (0.0, math.pi / 2)
    bev_resolution: tuple[int, int] = (200, 176)
    z_center: float = -1.0
    pos_iou: float = 0.6
    neg_iou: float = 0.45

    def __post_init__(self) -> None:
        rows, cols = self.bev_resolution
        if rows < 1 or cols < 1:
            raise ValueError("bev_resolution must be positive")
        if not self.yaws:
            raise ValueError("at least one anchor yaw is required")
        if not 0.0 <= self.neg_iou <= self.pos_iou <= 1.0:
            raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")

    @property
    def count(self) -> int:
        rows, cols = self.bev_resolution
        return rows * cols * len(self.yaws)


def generate_anchors(config: AnchorConfig, range_bounds: RangeBounds) -> list[Box3D]:
    """Materialise the anchor grid in row-major, yaw-minor order."""
    bounds = _check_bounds(range_bounds)
    (x_lo, x_hi), (y_lo, y_hi), _ = bounds
    rows, cols = config.bev_resolution
    dy = (y_hi - y_lo) / rows
    dx = (x_hi - x_lo) / cols
    anchors = []
    for r in range(rows):
        cy = y_lo + (r + 0.5) * dy
        for c in range(cols):
            cx = x_lo + (c + 0.5) * dx
            for yaw in config.yaws:
                anchors.append(
                    Box3D((cx, cy, config.z_center), config.dims, yaw, class_id=0)
                )
    return anchors


@dataclass(frozen=True)
class AnchorAssignment:
    """Per-anchor match labels and ground-truth indices.

    ``labels[i]`` is POSITIVE / NEGATIVE / IGNORE; ``gt_indices[i]`` gives
    the matched ground-truth index for positive anchors and -1 otherwise.
    """

    labels: np.ndarray
    gt_indices: np.ndarray
    max_iou: np.ndarray


def _pairwise_bev_iou(boxes_a: Sequence[Box3D], boxes_b: Sequence[Box3D]) -> np.ndarray:
    """Dense BEV IoU matrix with a centre-distance prefilter for far pairs."""
    n_a, n_b = len(boxes_a), len(boxes_b)
    iou = np.zeros((n_a, n_b))
    if n_a == 0 or n_b == 0:
        return iou
    ca = np.array([b.center[:2] for b in boxes_a])
    cb = np.array([b.center[:2] for b in boxes_b])
    da = np.array([b.bev_diagonal for b in boxes_a])
    db = np.array([b.bev_diagonal for b in boxes_b])
    reach = 0.5 * (da[:, None] + db[None, :])
    d2 = ((ca[:, None, :] - cb[None, :, :]) ** 2).sum(axis=2)
    for i, j in zip(*np.nonzero(d2 <= reach**2)):
        iou[i, j] = rotated_iou_bev(boxes_a[i], boxes_b[j])
    return iou


def match_anchors(
    anchors: Sequence[Box3D],
    gt_boxes: Sequence[Box3D],
    config: AnchorConfig,
) -> AnchorAssignment:
    """Assign ground truth to anchors by BEV IoU thresholds.

    An anchor is positive when its best overlap reaches ``pos_iou`` and
    negative below ``neg_iou``; anything between is ignored.  On top of
    the thresholds, the best-overlapping anchor of every ground-truth box
    is forced positive (provided the overlap is non-zero) so no object
    goes unclaimed.  Ties always resolve to the lower index; an anchor
    forced by several ground-truth boxes goes to the one with the higher
    overlap.
    """
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    gt_indices = np.full(n, -1, dtype=np.int64)
    max_iou = np.zeros(n)
    if n == 0 or len(gt_boxes) == 0:
        return AnchorAssignment(labels, gt_indices, max_iou)

    iou = _pairwise_bev_iou(anchors, gt_boxes)
    best_gt = iou.argmax(axis=1)  # ties -> lower gt index
    max_iou = iou[np.arange(n), best_gt]

    labels[max_iou >= config.pos_iou] = POSITIVE
    labels[(max_iou >= config.neg_iou) & (max_iou < config.pos_iou)] = IGNORE
    gt_indices[labels == POSITIVE] = best_gt[labels == POSITIVE]

    # Force-match each gt to its best anchor; conflicts keep the higher IoU.
    forced: dict[int, tuple[float, int]] = {}
    for g in range(len(gt_boxes)):
        a = int(iou[:, g].argmax())  # ties -> lower anchor index
        if iou[a, g] <= 0.0:
            continue
        incumbent = forced.get(a)
        if incumbent is None or iou[a, g] > incumbent[0]:
            forced[a] = (float(iou[a, g]), g)
    for a, (_, g) in forced.items():
        labels[a] = POSITIVE
        gt_indices[a] = g
    return AnchorAssignment(labels, gt_indices, max_iou)


def encode_box(gt: Box3D, anchor: Box3D) -> np.ndarray:
    """Regression residuals of ``gt`` relative to ``anchor``.

    Centre offsets are normalised by the anchor footprint diagonal (x, y)
    and height (z); sizes are log ratios; yaw is a plain difference.
    """
    d = anchor.bev_diagonal
    return np.array(
        [
            (gt.center[0] - anchor.center[0]) / d,
            (gt.center[1] - anchor.center[1]) / d,
            (gt.center[2] - anchor.center[2]) / anchor.dims[2],
            math.log(gt.dims[0] / anchor.dims[0]),
            math.log(gt.dims[1] / anchor.dims[1]),
            math.log(gt.dims[2] / anchor.dims[2]),
            gt.yaw - anchor.yaw,
        ]
    )


def decode_box(
    residuals: np.ndarray,
    anchor: Box3D,
    score: float | None = None,
    class_id: int | None = None,
) -> Box3D:
    """Invert :func:`encode_box`; the yaw is re-normalised to (-pi, pi]."""
    res = np.asarray(residuals, dtype=float)
    if res.shape != (7,):
        raise ValueError(f"expected 7 residuals, got shape {res.shape}")
    d = anchor.bev_diagonal
    return Box3D(
        center=(
            anchor.center[0] + res[0] * d,
            anchor.center[1] + res[1] * d,
            anchor.center[2] + res[2] * anchor.dims[2],
        ),
        dims=(
            anchor.dims[0] * math.exp(res[3]),
            anchor.dims[1] * math.exp(res[4]),
            anchor.dims[2] * math.exp(res[5]),
        ),
        yaw=anchor.yaw + res[6],
        score=score,
        class_id=class_id if class_id is not None else anchor.class_id,
    )


@dataclass(frozen=True)
class AugmentParams:
    """Ranges for global augmentation draws.

    The rotation angle and scale factor are drawn uniformly from their
    ranges; when ``flip`` is enabled a mirror across the x-z plane is
    applied with probability one half.  Degenerate ranges pin the draw,
    so ``rotation_range=(0, 0), scale_range=(1, 1), flip=False`` is the
    identity.
    """

    rotation_range: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    scale_range: tuple[float, float] = (0.95, 1.05)
    flip: bool = True

    def __post_init__(self) -> None:
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ValueError("rotation_range must be ordered")
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValueError("scale_range must be ordered and positive")


def augment_global(scene: Scene, seed: int, params: AugmentParams) -> Scene:
    """Apply one seeded global rotation + scaling (+ optional flip) to a scene.

    Points and ground-truth boxes move through the same transform: rotate
    about the z axis, scale uniformly, then optionally mirror y -> -y.
    Box yaws follow (add the angle; negate under the mirror), sizes scale,
    reflectance is untouched.  The scene range is replaced by the
    axis-aligned cover of the transformed range corners (plus a hair of
    padding) so the centre-in-range invariant survives.
    """
    rng = np.random.default_rng(seed)
    angle = float(rng.uniform(*params.rotation_range))
    scale = float(rng.uniform(*params.scale_range))
    do_flip = bool(params.flip and rng.random() < 0.5)

    c, s = math.cos(angle), math.sin(angle)

    def txy(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xr = scale * (c * x - s * y)
        yr = scale * (s * x + c * y)
        if do_flip:
            yr = -yr
        return xr, yr

    pts = scene.cloud.points
    new_pts = np.empty_like(pts)
    new_pts[:, 0], new_pts[:, 1] = txy(pts[:, 0], pts[:, 1])
    new_pts[:, 2] = scale * pts[:, 2]
    new_pts[:, 3] = pts[:, 3]

    new_boxes = []
    for box in scene.gt_boxes:
        bx, by = txy(np.array([box.center[0]]), np.array([box.center[1]]))
        yaw = box.yaw + angle
        if do_flip:
            yaw = -yaw
        new_boxes.append(
            Box3D(
                center=(float(bx[0]), float(by[0]), scale * box.center[2]),
                dims=tuple(scale * d for d in box.dims),
                yaw=yaw,
                score=box.score,
                class_id=box.class_id,
            )
        )

    (x_lo, x_hi), (y_lo, y_hi), (z_lo, z_hi) = scene.range_bounds
    corner_x = np.array([x_lo, x_lo, x_hi, x_hi])
    corner_y = np.array([y_lo, y_hi, y_lo, y_hi])
    cx, cy = txy(corner_x, corner_y)
    z_pair = sorted((scale * z_lo, scale * z_hi))
    pad = 1e-9
    new_bounds = (
        (float(cx.min()) - pad, float(cx.max()) + pad),
        (float(cy.min()) - pad, float(cy.max()) + pad),
        (z_pair[0] - pad, z_pair[1] + pad),
    )
    return Scene(PointCloud(new_pts), tuple(new_boxes), new_bounds)


def point_in_box(point: np.ndarray, box: Box3D) -> bool:
    """Face-inclusive containment test for a single 3D point."""
    dx = point[0] - box.center[0]
    dy = point[1] - box.center[1]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    l, w, h = box.dims
    return (
        abs(lx) <= 0.5 * l
        and abs(ly) <= 0.5 * w
        and abs(point[2] - box.center[2]) <= 0.5 * h
    )


def points_in_box(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Vectorised face-inclusive containment for an (N, 3) array."""
    d = points[:, :2] - np.array(box.center[:2])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    l, w, h = box.dims
    return (
        (np.abs(lx) <= 0.5 * l)
        & (np.abs(ly) <= 0.5 * w)
        & (np.abs(points[:, 2] - box.center[2]) <= 0.5 * h)
    )
