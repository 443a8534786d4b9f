"""Independent reference implementations used by the test suite.

Everything here is written the slow, obvious way — pure-Python loops,
all-pairs scans, Monte-Carlo sampling — deliberately sharing as little
code as possible with the library so agreement actually means something.
Only the Box3D container and the low-level rotated-IoU primitive are
reused where the quantity under test is the surrounding algorithm rather
than the overlap itself.
"""

from __future__ import annotations

import math

import numpy as np

from graphdet.scene import Box3D


# ---------------------------------------------------------------------------
# overlap oracles


def point_in_rect(px: np.ndarray, py: np.ndarray, box: Box3D) -> np.ndarray:
    """Vectorised membership of BEV points in a rotated footprint."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = px - box.center[0]
    dy = py - box.center[1]
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (np.abs(lx) <= 0.5 * box.dims[0]) & (np.abs(ly) <= 0.5 * box.dims[1])


def mc_iou_bev(a: Box3D, b: Box3D, n_samples: int, seed: int) -> float:
    """Monte-Carlo BEV IoU: sample uniformly inside a's footprint.

    The intersection is ``area(a) * P(point of a lies in b)``; sampling
    one box only keeps the variance of the ratio low.
    """
    rng = np.random.default_rng(seed)
    l, w = a.dims[0], a.dims[1]
    u = rng.uniform(-0.5 * l, 0.5 * l, size=n_samples)
    v = rng.uniform(-0.5 * w, 0.5 * w, size=n_samples)
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    px = a.center[0] + c * u - s * v
    py = a.center[1] + s * u + c * v
    inter = l * w * float(np.count_nonzero(point_in_rect(px, py, b))) / n_samples
    union = l * w + b.dims[0] * b.dims[1] - inter
    return inter / union


def mc_iou_3d(a: Box3D, b: Box3D, n_samples: int, seed: int) -> float:
    """Monte-Carlo volumetric IoU, sampling uniformly inside box a."""
    rng = np.random.default_rng(seed)
    l, w, h = a.dims
    u = rng.uniform(-0.5 * l, 0.5 * l, size=n_samples)
    v = rng.uniform(-0.5 * w, 0.5 * w, size=n_samples)
    z = rng.uniform(*a.z_interval(), size=n_samples)
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    px = a.center[0] + c * u - s * v
    py = a.center[1] + s * u + c * v
    bot, top = b.z_interval()
    hit = point_in_rect(px, py, b) & (z >= bot) & (z <= top)
    inter = a.volume * float(np.count_nonzero(hit)) / n_samples
    union = a.volume + b.volume - inter
    return inter / union


def aligned_iou_bev(a: Box3D, b: Box3D) -> float:
    """Closed-form BEV IoU for boxes whose yaw is a multiple of pi/2."""

    def half_extents(box: Box3D) -> tuple[float, float]:
        quarter = round(box.yaw / (0.5 * math.pi)) % 2
        l, w = box.dims[0], box.dims[1]
        return (0.5 * l, 0.5 * w) if quarter == 0 else (0.5 * w, 0.5 * l)

    ax, ay = half_extents(a)
    bx, by = half_extents(b)
    ox = min(a.center[0] + ax, b.center[0] + bx) - max(a.center[0] - ax, b.center[0] - bx)
    oy = min(a.center[1] + ay, b.center[1] + by) - max(a.center[1] - ay, b.center[1] - by)
    if ox <= 0.0 or oy <= 0.0:
        return 0.0
    inter = ox * oy
    union = 4.0 * ax * ay + 4.0 * bx * by - inter
    return inter / union


# ---------------------------------------------------------------------------
# suppression / sampling / graph oracles


def brute_nms(
    boxes: list[Box3D],
    iou_fn,
    iou_threshold: float,
    score_threshold: float,
) -> list[Box3D]:
    """O(n^2) greedy suppression; ``iou_fn`` supplies the overlap."""
    order = sorted(
        (i for i, b in enumerate(boxes) if b.score >= score_threshold),
        key=lambda i: (-boxes[i].score, i),
    )
    kept: list[int] = []
    for i in order:
        if all(iou_fn(boxes[i], boxes[k]) <= iou_threshold for k in kept):
            kept.append(i)
    return [boxes[i] for i in kept]


def brute_fps(positions: np.ndarray, k: int, start_index: int = 0) -> list[int]:
    """Exhaustive greedy farthest point sampling with explicit loops."""
    n = len(positions)
    chosen = [start_index]
    for _ in range(k - 1):
        best_i, best_d = -1, -1.0
        for i in range(n):
            d = min(
                float(((positions[i] - positions[j]) ** 2).sum()) for j in chosen
            )
            if d > best_d:  # strict: exact ties keep the earlier (lower) index
                best_i, best_d = i, d
        chosen.append(best_i)
    return chosen


def brute_radius_graph(coords: np.ndarray, radius: float) -> list[tuple[int, ...]]:
    """All-pairs strict-radius adjacency, self-loops included, sorted."""
    n = len(coords)
    out = []
    for i in range(n):
        neigh = [
            j
            for j in range(n)
            if float(((coords[i] - coords[j]) ** 2).sum()) < radius * radius
        ]
        out.append(tuple(sorted(neigh)))
    return out


def brute_propagate(
    src_pos: np.ndarray, src_feat: np.ndarray, queries: np.ndarray, eps: float = 1e-8
) -> np.ndarray:
    """Loop-wise 3-nearest inverse-squared-distance interpolation."""
    out = np.zeros((len(queries), src_feat.shape[1]))
    k = min(3, len(src_pos))
    for qi, q in enumerate(queries):
        d2 = [float(((q - p) ** 2).sum()) for p in src_pos]
        nearest = sorted(range(len(src_pos)), key=lambda i: (d2[i], i))[:k]
        weights = [1.0 / (d2[i] + eps) for i in nearest]
        total = sum(weights)
        for w, i in zip(weights, nearest):
            out[qi] += (w / total) * src_feat[i]
    return out


# ---------------------------------------------------------------------------
# anchor matching oracle


def brute_match_anchors(
    anchors: list[Box3D],
    gt_boxes: list[Box3D],
    pos_iou: float,
    neg_iou: float,
    iou_fn,
) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive two-phase assignment with forced best-anchor positives.

    Returns (labels, gt_indices) with labels 1/0/-1 for
    positive/negative/ignore.  Phase one applies the IoU thresholds to
    each anchor's best overlap (ties to the lower gt index).  Phase two
    forces the best anchor of every ground truth positive (skipping zero
    overlaps), overriding phase one; an anchor forced by several ground
    truths keeps the higher overlap, earlier gt on exact ties.
    """
    n, g = len(anchors), len(gt_boxes)
    labels = np.zeros(n, dtype=np.int8)
    gt_indices = np.full(n, -1, dtype=np.int64)
    if n == 0 or g == 0:
        return labels, gt_indices
    iou = np.array([[iou_fn(a, gt) for gt in gt_boxes] for a in anchors])
    for i in range(n):
        best = 0
        for j in range(1, g):
            if iou[i, j] > iou[i, best]:
                best = j
        if iou[i, best] >= pos_iou:
            labels[i] = 1
            gt_indices[i] = best
        elif iou[i, best] >= neg_iou:
            labels[i] = -1
    forced: dict[int, tuple[float, int]] = {}
    for j in range(g):
        best = 0
        for i in range(1, n):
            if iou[i, j] > iou[best, j]:
                best = i
        if iou[best, j] <= 0.0:
            continue
        if best not in forced or iou[best, j] > forced[best][0]:
            forced[best] = (float(iou[best, j]), j)
    for i, (_, j) in forced.items():
        labels[i] = 1
        gt_indices[i] = j
    return labels, gt_indices


# ---------------------------------------------------------------------------
# metric oracles


def brute_pr_curve(
    detections: list[Box3D],
    gt_boxes: list[Box3D],
    quality_fn,
) -> list[tuple[float, float]]:
    """Greedy confidence-ordered matching, recomputed with plain loops.

    ``quality_fn(det, gt)`` returns a comparable quality or None for an
    inadmissible pair; higher quality wins.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    taken = set()
    curve = []
    tp = fp = 0
    for i in order:
        best_g, best_q = -1, None
        for g in range(len(gt_boxes)):
            if g in taken:
                continue
            q = quality_fn(detections[i], gt_boxes[g])
            if q is None:
                continue
            if best_q is None or q > best_q:
                best_g, best_q = g, q
        if best_g >= 0:
            taken.add(best_g)
            tp += 1
        else:
            fp += 1
        recall = tp / len(gt_boxes) if gt_boxes else 0.0
        curve.append((tp / (tp + fp), recall))
    return curve


def max_scan_ap(curve: list[tuple[float, float]], levels: list[float]) -> float:
    """Literal definition of interpolated AP: per level, scan every curve
    point for the best precision achieved at recall >= level."""
    total = 0.0
    for level in levels:
        best = 0.0
        for precision, recall in curve:
            if recall >= level and precision > best:
                best = precision
        total += best
    return total / len(levels)


# ---------------------------------------------------------------------------
# voxel oracle


def brute_voxelize(
    points: np.ndarray,
    origin: tuple[float, float, float],
    step: tuple[float, float, float],
    resolution: tuple[int, int, int],
    cap: int | None,
) -> dict[tuple[int, int, int], tuple[np.ndarray, int]]:
    """Dict-of-lists voxelization keeping the first ``cap`` points per cell."""
    cells: dict[tuple[int, int, int], list[np.ndarray]] = {}
    for p in points:
        idx = tuple(
            min(int(math.floor((p[ax] - origin[ax]) / step[ax])), resolution[ax] - 1)
            for ax in range(3)
        )
        cells.setdefault(idx, []).append(p)
    out = {}
    for idx, rows in cells.items():
        kept = rows if cap is None else rows[:cap]
        out[idx] = (np.mean(np.stack(kept), axis=0), len(kept))
    return out


# ---------------------------------------------------------------------------
# random instance helpers


def random_box(rng: np.random.Generator, spread: float = 10.0, score: bool = False) -> Box3D:
    """A well-conditioned random box for oracle comparisons."""
    return Box3D(
        center=tuple(rng.uniform(-spread, spread, size=3)),
        dims=tuple(rng.uniform(0.8, 4.5, size=3)),
        yaw=float(rng.uniform(-math.pi, math.pi)),
        score=float(rng.uniform(0.0, 1.0)) if score else None,
    )
