"""End-to-end desk pipeline: synthetic scene through refined detections.

The pipeline wires every stage together at a size that runs in seconds:
a seeded synthetic scene is voxelized, smooth deterministic feature
fields stand in for a learned backbone, proposals are ground-truth boxes
under seeded noise (standing in for a region proposal stage), region
feature aggregation builds node states, the graph refiner and its header
produce scored boxes, suppression and metrics close the loop.  Training
is plain gradient descent on the summed detection losses against a fixed
synthetic batch.

Evaluation always happens on a scene derived from a different seed than
the training batch, so reported AP measures generalisation of the
refinement stacks rather than memorisation of one scene.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .geom import (
    POSITIVE,
    AnchorAssignment,
    AnchorConfig,
    Box3D,
    encode_box,
    generate_anchors,
    match_anchors,
    nms,
    rotated_iou_bev,
)
from .gnn import (
    GraphUpdater,
    NeighborhoodGraph,
    UpdaterGrads,
    build_graph,
    header_backward,
    header_forward,
    refine_proposals,
    update_backward,
    update_extended_forward,
    update_vanilla_forward,
)
from .interp import (
    BevFeatureMap,
    FeatureSet,
    propagate_features,
    sample_bev_grid,
    sample_bev_point,
)
from .metrics import BevIouMatcher, RecallSchedule, interpolated_ap, precision_recall
from .nnet import (
    DenseStack,
    LossConfig,
    add_layer_grads,
    focal_loss,
    focal_loss_grad,
    masked_smooth_l1_mean,
    masked_smooth_l1_mean_grad,
    offset_loss,
    offset_loss_grad,
    total_loss,
)
from .rfa import (
    RfaConfig,
    auxiliary_targets,
    default_point_stacks,
    point_pyramid,
    synthetic_bev_map,
    voxel_feature_set,
)
from .scene import (
    KITTI_RANGE,
    RangeBounds,
    Scene,
    clip_to_range,
    generate_synthetic_scene,
    normalize_yaw,
)
from .voxel import SparseVoxelGrid, VoxelizationConfig, _axis_cells, voxelize

# Seed offsets separating the pipeline's random streams.  Training scenes
# stride by _SCENE_STRIDE; the evaluation scene deliberately lies outside
# that family so reported AP measures transfer, not recall of the batch.
_PROPOSAL_OFFSET = 11
_MODEL_OFFSET = 211
_SCENE_STRIDE = 101
_EVAL_SCENE_OFFSET = 7919
_EVAL_PROPOSAL_OFFSET = 7930
_BEV_FIELD_OFFSET = 1
_POINT_STACK_OFFSET = 2


class ConfigError(ValueError):
    """Raised for malformed or inconsistent pipeline configuration."""


@dataclass(frozen=True)
class SceneConfig:
    n_objects: int = 4
    points_per_object: int = 160
    clutter_points: int = 80
    min_separation: float = 7.0

    def __post_init__(self) -> None:
        if self.n_objects < 0 or self.points_per_object < 0 or self.clutter_points < 0:
            raise ConfigError("scene sizes must be non-negative")
        if self.min_separation <= 0:
            raise ConfigError("min_separation must be positive")


@dataclass(frozen=True)
class GnnPipelineConfig:
    depth: int = 3
    radius: float = 2.0
    hidden_dim: int = 16
    variant: str = "extended"
    header_hidden: int = 8
    header_init: str = "random"

    def __post_init__(self) -> None:
        if not 0 <= self.depth <= 5:
            raise ConfigError("gnn depth must lie in 0..5")
        if self.radius <= 0:
            raise ConfigError("gnn radius must be positive")
        if self.hidden_dim < 1 or self.header_hidden < 1:
            raise ConfigError("gnn widths must be positive")
        if self.variant not in ("extended", "vanilla"):
            raise ConfigError(f"unknown gnn variant {self.variant!r}")
        if self.header_init not in ("random", "zero"):
            raise ConfigError(f"unknown header_init {self.header_init!r}")


@dataclass(frozen=True)
class ProposalConfig:
    per_gt: int = 8
    center_noise: float = 0.3
    yaw_noise: float = 0.1
    pos_iou: float = 0.7

    def __post_init__(self) -> None:
        if self.per_gt < 1:
            raise ConfigError("per_gt must be at least one")
        if self.center_noise < 0 or self.yaw_noise < 0:
            raise ConfigError("proposal noise must be non-negative")
        if not 0.0 < self.pos_iou <= 1.0:
            raise ConfigError("proposal pos_iou must lie in (0, 1]")


@dataclass(frozen=True)
class NmsPipelineConfig:
    iou_threshold: float = 0.1
    score_threshold: float = 0.3

    def __post_init__(self) -> None:
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ConfigError("nms iou_threshold must lie in [0, 1]")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ConfigError("nms score_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class TrainPipelineConfig:
    steps: int = 500
    learning_rate: float = 0.05
    batch_scenes: int = 1

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ConfigError("train steps must be non-negative")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_scenes < 1:
            raise ConfigError("batch_scenes must be at least one")


@dataclass(frozen=True)
class EvalConfig:
    ap_iou: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 < self.ap_iou <= 1.0:
            raise ConfigError("ap_iou must lie in (0, 1]")


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the desk pipeline, validated on construction."""

    seed: int = 0
    feature_seed: int = 1234
    range_bounds: RangeBounds = KITTI_RANGE
    bev_cell_size: float = 0.4
    scene: SceneConfig = field(default_factory=SceneConfig)
    voxel: VoxelizationConfig = field(default_factory=VoxelizationConfig)
    anchors: AnchorConfig = field(
        default_factory=lambda: AnchorConfig(bev_resolution=(40, 40))
    )
    rfa: RfaConfig = field(
        default_factory=lambda: RfaConfig(keypoint_counts=(64, 16, 8))
    )
    point_hidden: int = 16
    gnn: GnnPipelineConfig = field(default_factory=GnnPipelineConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    nms: NmsPipelineConfig = field(default_factory=NmsPipelineConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainPipelineConfig = field(default_factory=TrainPipelineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    voxel_drop: str = "first"

    def __post_init__(self) -> None:
        if self.bev_cell_size <= 0:
            raise ConfigError("bev_cell_size must be positive")
        if self.point_hidden < 1:
            raise ConfigError("point_hidden must be positive")
        if self.voxel_drop not in ("first", "random"):
            raise ConfigError(f"unknown voxel drop mode {self.voxel_drop!r}")
        if self.rfa.point_dim % 2 != 0:
            raise ConfigError("rfa point_dim must be even (two grouping radii)")
        if self.voxel.range_bounds != self.range_bounds:
            object.__setattr__(
                self,
                "voxel",
                VoxelizationConfig(
                    step=self.voxel.step,
                    max_points_per_voxel=self.voxel.max_points_per_voxel,
                    range_bounds=self.range_bounds,
                ),
            )

    @property
    def state_dim(self) -> int:
        return self.rfa.feature_dim


# ---------------------------------------------------------------------------
# Configuration files
# ---------------------------------------------------------------------------

_SCHEMA: dict[str, Any] = {
    "seed": None,
    "feature_seed": None,
    "range": None,
    "bev_cell_size": None,
    "voxel_drop": None,
    "point_hidden": None,
    "scene": {"n_objects", "points_per_object", "clutter_points", "min_separation"},
    "voxel": {"step", "max_points_per_voxel"},
    "anchors": {"rows", "cols", "yaws", "z_center", "pos_iou", "neg_iou", "dims"},
    "rfa": {"m1", "m2", "voxel_dim", "point_dim", "keypoint_counts", "radii"},
    "gnn": {"depth", "radius", "hidden_dim", "variant", "header_hidden", "header_init"},
    "proposals": {"per_gt", "center_noise", "yaw_noise", "pos_iou"},
    "nms": {"iou_threshold", "score_threshold"},
    "loss": {"focal_alpha", "focal_gamma", "smooth_l1_beta", "focal_background"},
    "train": {"steps", "learning_rate", "batch_scenes"},
    "eval": {"ap_iou"},
}


def parse_pipeline_config(raw: dict[str, Any]) -> PipelineConfig:
    """Build a validated config from a plain dict (e.g. parsed JSON).

    Every key must be known; sections and keys left out fall back to
    defaults.  Inconsistent values raise :class:`ConfigError`.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    for key in raw:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        allowed = _SCHEMA[key]
        if allowed is not None:
            section = raw[key]
            if not isinstance(section, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            for sub in section:
                if sub not in allowed:
                    raise ConfigError(f"unknown config key {key!r}.{sub!r}")

    def section(name: str) -> dict[str, Any]:
        return dict(raw.get(name, {}))

    try:
        kwargs: dict[str, Any] = {}
        if "seed" in raw:
            kwargs["seed"] = int(raw["seed"])
        if "feature_seed" in raw:
            kwargs["feature_seed"] = int(raw["feature_seed"])
        if "range" in raw:
            rng = raw["range"]
            kwargs["range_bounds"] = tuple(tuple(float(v) for v in pair) for pair in rng)
        if "bev_cell_size" in raw:
            kwargs["bev_cell_size"] = float(raw["bev_cell_size"])
        if "voxel_drop" in raw:
            kwargs["voxel_drop"] = str(raw["voxel_drop"])
        if "point_hidden" in raw:
            kwargs["point_hidden"] = int(raw["point_hidden"])
        if "scene" in raw:
            kwargs["scene"] = SceneConfig(**section("scene"))
        if "voxel" in raw:
            vox = section("voxel")
            if "step" in vox:
                vox["step"] = tuple(float(v) for v in vox["step"])
            kwargs["voxel"] = VoxelizationConfig(
                **vox, range_bounds=kwargs.get("range_bounds", KITTI_RANGE)
            )
        if "anchors" in raw:
            anc = section("anchors")
            anchor_kwargs: dict[str, Any] = {}
            rows = int(anc.pop("rows", 40))
            cols = int(anc.pop("cols", 40))
            anchor_kwargs["bev_resolution"] = (rows, cols)
            if "yaws" in anc:
                anchor_kwargs["yaws"] = tuple(float(v) for v in anc.pop("yaws"))
            if "dims" in anc:
                anchor_kwargs["dims"] = tuple(float(v) for v in anc.pop("dims"))
            for name in ("z_center", "pos_iou", "neg_iou"):
                if name in anc:
                    anchor_kwargs[name] = float(anc.pop(name))
            kwargs["anchors"] = AnchorConfig(**anchor_kwargs)
        if "rfa" in raw:
            rfa_kwargs = section("rfa")
            if "keypoint_counts" in rfa_kwargs:
                rfa_kwargs["keypoint_counts"] = tuple(
                    int(v) for v in rfa_kwargs["keypoint_counts"]
                )
            if "radii" in rfa_kwargs:
                rfa_kwargs["radii"] = tuple(
                    tuple(float(v) for v in pair) for pair in rfa_kwargs["radii"]
                )
            kwargs["rfa"] = RfaConfig(**rfa_kwargs)
        else:
            kwargs["rfa"] = RfaConfig(keypoint_counts=(64, 16, 8))
        if "gnn" in raw:
            kwargs["gnn"] = GnnPipelineConfig(**section("gnn"))
        if "proposals" in raw:
            kwargs["proposals"] = ProposalConfig(**section("proposals"))
        if "nms" in raw:
            kwargs["nms"] = NmsPipelineConfig(**section("nms"))
        if "loss" in raw:
            kwargs["loss"] = LossConfig(**section("loss"))
        if "train" in raw:
            kwargs["train"] = TrainPipelineConfig(**section("train"))
        if "eval" in raw:
            kwargs["eval"] = EvalConfig(**section("eval"))
        return PipelineConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_pipeline_config(path: str) -> PipelineConfig:
    """Read and validate a JSON pipeline config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_pipeline_config(raw)


def config_to_dict(config: PipelineConfig) -> dict[str, Any]:
    """The JSON-serialisable mirror of a config (round-trips through parse)."""
    return {
        "seed": config.seed,
        "feature_seed": config.feature_seed,
        "range": [list(pair) for pair in config.range_bounds],
        "bev_cell_size": config.bev_cell_size,
        "voxel_drop": config.voxel_drop,
        "point_hidden": config.point_hidden,
        "scene": {
            "n_objects": config.scene.n_objects,
            "points_per_object": config.scene.points_per_object,
            "clutter_points": config.scene.clutter_points,
            "min_separation": config.scene.min_separation,
        },
        "voxel": {
            "step": list(config.voxel.step),
            "max_points_per_voxel": config.voxel.max_points_per_voxel,
        },
        "anchors": {
            "rows": config.anchors.bev_resolution[0],
            "cols": config.anchors.bev_resolution[1],
            "yaws": list(config.anchors.yaws),
            "z_center": config.anchors.z_center,
            "pos_iou": config.anchors.pos_iou,
            "neg_iou": config.anchors.neg_iou,
            "dims": list(config.anchors.dims),
        },
        "rfa": {
            "m1": config.rfa.m1,
            "m2": config.rfa.m2,
            "voxel_dim": config.rfa.voxel_dim,
            "point_dim": config.rfa.point_dim,
            "keypoint_counts": list(config.rfa.keypoint_counts),
            "radii": [list(pair) for pair in config.rfa.radii],
        },
        "gnn": {
            "depth": config.gnn.depth,
            "radius": config.gnn.radius,
            "hidden_dim": config.gnn.hidden_dim,
            "variant": config.gnn.variant,
            "header_hidden": config.gnn.header_hidden,
            "header_init": config.gnn.header_init,
        },
        "proposals": {
            "per_gt": config.proposals.per_gt,
            "center_noise": config.proposals.center_noise,
            "yaw_noise": config.proposals.yaw_noise,
            "pos_iou": config.proposals.pos_iou,
        },
        "nms": {
            "iou_threshold": config.nms.iou_threshold,
            "score_threshold": config.nms.score_threshold,
        },
        "loss": {
            "focal_alpha": config.loss.focal_alpha,
            "focal_gamma": config.loss.focal_gamma,
            "smooth_l1_beta": config.loss.smooth_l1_beta,
            "focal_background": config.loss.focal_background,
        },
        "train": {
            "steps": config.train.steps,
            "learning_rate": config.train.learning_rate,
            "batch_scenes": config.train.batch_scenes,
        },
        "eval": {"ap_iou": config.eval.ap_iou},
    }


# ---------------------------------------------------------------------------
# World assembly
# ---------------------------------------------------------------------------


@dataclass
class _World:
    """One fully materialised scene with every precomputed training input."""

    scene: Scene
    grid: SparseVoxelGrid
    bev: BevFeatureMap
    point_voxel_feats: FeatureSet | None  # voxel field interpolated onto the cloud
    aux_mask: np.ndarray
    aux_offsets: np.ndarray
    anchors: list[Box3D]
    anchor_assignment: AnchorAssignment
    anchor_inputs: np.ndarray
    anchor_reg_targets: np.ndarray
    proposals: list[Box3D]
    states: np.ndarray
    graph: NeighborhoodGraph | None
    prop_fg: np.ndarray
    prop_reg_targets: np.ndarray


def _encode_target(gt: Box3D, reference: Box3D) -> np.ndarray:
    """Box residual with the yaw difference wrapped to (-pi, pi].

    The raw encoding's plain yaw difference jumps by 2*pi when the two
    yaws straddle the seam; decoded boxes are identical either way, so
    training targets use the wrapped branch.
    """
    vec = encode_box(gt, reference)
    vec[6] = normalize_yaw(vec[6])
    return vec


def _bev_shape(config: PipelineConfig) -> tuple[int, int]:
    (x_lo, x_hi), (y_lo, y_hi), _ = config.range_bounds
    rows = _axis_cells(y_hi - y_lo, config.bev_cell_size)
    cols = _axis_cells(x_hi - x_lo, config.bev_cell_size)
    return rows, cols


def _make_proposals(
    config: PipelineConfig, scene: Scene, seed: int
) -> list[Box3D]:
    rng = np.random.default_rng(seed)
    out: list[Box3D] = []
    for gt in scene.gt_boxes:
        for _ in range(config.proposals.per_gt):
            dx, dy = rng.normal(0.0, config.proposals.center_noise, size=2)
            dz = rng.normal(0.0, 0.3 * config.proposals.center_noise)
            dyaw = rng.normal(0.0, config.proposals.yaw_noise)
            out.append(
                Box3D(
                    center=(gt.center[0] + dx, gt.center[1] + dy, gt.center[2] + dz),
                    dims=gt.dims,
                    yaw=gt.yaw + dyaw,
                    class_id=gt.class_id,
                )
            )
    return out


def _build_world(config: PipelineConfig, scene_seed: int, proposal_seed: int) -> _World:
    scene = clip_to_range(
        generate_synthetic_scene(
            scene_seed,
            config.scene.n_objects,
            config.scene.points_per_object,
            config.scene.clutter_points,
            range_bounds=config.range_bounds,
            min_separation=config.scene.min_separation,
        )
    )
    cloud = scene.cloud
    grid = voxelize(cloud, config.voxel, drop=config.voxel_drop, seed=scene_seed)
    vox_feats = voxel_feature_set(grid, config.rfa.voxel_dim, config.feature_seed)

    rows, cols = _bev_shape(config)
    (x_lo, _), (y_lo, _), _ = config.range_bounds
    bev = synthetic_bev_map(
        rows,
        cols,
        config.rfa.pixel_dim,
        config.bev_cell_size,
        (x_lo, y_lo),
        config.feature_seed + _BEV_FIELD_OFFSET,
    )

    if len(cloud) and len(vox_feats):
        point_voxel_feats = propagate_features(vox_feats, cloud.xyz)
    else:
        point_voxel_feats = None
    aux_mask, aux_offsets = auxiliary_targets(cloud, scene.gt_boxes)

    anchors = generate_anchors(config.anchors, config.range_bounds)
    assignment = match_anchors(anchors, scene.gt_boxes, config.anchors)
    anchor_inputs = np.stack(
        [sample_bev_point(bev, a.center[0], a.center[1]) for a in anchors]
    )
    anchor_reg_targets = np.zeros((len(anchors), 7))
    for i in np.flatnonzero(assignment.labels == POSITIVE):
        anchor_reg_targets[i] = _encode_target(
            scene.gt_boxes[assignment.gt_indices[i]], anchors[i]
        )

    proposals = _make_proposals(config, scene, proposal_seed)
    if proposals and point_voxel_feats is not None:
        stacks = default_point_stacks(
            config.rfa,
            config.feature_seed + _POINT_STACK_OFFSET,
            hidden=config.point_hidden,
        )
        pyramid = point_pyramid(cloud, config.rfa, stacks)
        centres = np.array([p.center for p in proposals])
        vox_at = propagate_features(point_voxel_feats, centres).features
        point_at = propagate_features(pyramid, centres).features
        pixel_at = np.stack(
            [sample_bev_grid(bev, p, config.rfa.m1, config.rfa.m2) for p in proposals]
        )
        states = np.concatenate([vox_at, pixel_at, point_at], axis=1)
        graph = build_graph(list(zip(proposals, states)), config.gnn.radius)
    else:
        proposals = []
        states = np.zeros((0, config.state_dim))
        graph = None

    n_p = len(proposals)
    prop_fg = np.zeros(n_p, dtype=bool)
    prop_reg_targets = np.zeros((n_p, 7))
    if n_p and scene.gt_boxes:
        for i, prop in enumerate(proposals):
            best_iou, best_g = 0.0, -1
            for g, gt in enumerate(scene.gt_boxes):
                iou = rotated_iou_bev(prop, gt)
                if iou > best_iou:
                    best_iou, best_g = iou, g
            if best_iou >= config.proposals.pos_iou and best_g >= 0:
                prop_fg[i] = True
                prop_reg_targets[i] = _encode_target(scene.gt_boxes[best_g], prop)

    return _World(
        scene=scene,
        grid=grid,
        bev=bev,
        point_voxel_feats=point_voxel_feats,
        aux_mask=aux_mask,
        aux_offsets=aux_offsets,
        anchors=anchors,
        anchor_assignment=assignment,
        anchor_inputs=anchor_inputs,
        anchor_reg_targets=anchor_reg_targets,
        proposals=proposals,
        states=states,
        graph=graph,
        prop_fg=prop_fg,
        prop_reg_targets=prop_reg_targets,
    )


# ---------------------------------------------------------------------------
# Models and training
# ---------------------------------------------------------------------------


@dataclass
class PipelineModels:
    """All trainable stacks of the desk pipeline."""

    updater: GraphUpdater
    cls_stack: DenseStack
    reg_stack: DenseStack
    rpn_cls: DenseStack
    rpn_reg: DenseStack
    aux_seg: DenseStack
    aux_off: DenseStack


def init_models(config: PipelineConfig) -> PipelineModels:
    """Seeded (or zeroed, per ``header_init``) model stacks."""
    f = config.state_dim
    seed = config.seed + _MODEL_OFFSET
    child = np.random.SeedSequence(seed).generate_state(8)
    extended = config.gnn.variant == "extended"
    updater = GraphUpdater.seeded(
        f, config.gnn.hidden_dim, config.gnn.depth, int(child[0]), extended=extended
    )
    hh = config.gnn.header_hidden
    if config.gnn.header_init == "zero":
        cls_stack = DenseStack.zeros((f, 1))
        reg_stack = DenseStack.zeros((f, 7))
    else:
        cls_stack = DenseStack.seeded((f, hh, 1), int(child[1]))
        reg_stack = DenseStack.seeded((f, hh, 7), int(child[2]))
    c = config.rfa.pixel_dim
    rpn_cls = DenseStack.seeded((c, hh, 1), int(child[3]))
    rpn_reg = DenseStack.seeded((c, hh, 7), int(child[4]))
    aux_seg = DenseStack.seeded((config.rfa.voxel_dim, 16, 1), int(child[5]))
    aux_off = DenseStack.seeded((config.rfa.voxel_dim, 16, 3), int(child[6]))
    return PipelineModels(updater, cls_stack, reg_stack, rpn_cls, rpn_reg, aux_seg, aux_off)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _evaluate(
    models: PipelineModels, world: _World, config: PipelineConfig, want_grads: bool
):
    """Forward (and optionally backward) pass over one world.

    Returns (loss components dict, grads dict or None).  Gradient entries
    mirror the model stacks.
    """
    cfg_loss = config.loss
    beta = cfg_loss.smooth_l1_beta
    grads: dict[str, Any] = {} if want_grads else None

    # Proposal-stage loss over anchors.
    labels = world.anchor_assignment.labels
    valid = labels != -1
    fg_anchor = labels == POSITIVE
    cls_out, cls_cache = models.rpn_cls.forward(world.anchor_inputs)
    probs = _sigmoid(cls_out[:, 0])
    l_rpn_cls = focal_loss(probs[valid], fg_anchor[valid], cfg_loss)
    reg_out, reg_cache = models.rpn_reg.forward(world.anchor_inputs)
    l_rpn_reg = masked_smooth_l1_mean(
        reg_out, world.anchor_reg_targets, fg_anchor, beta
    )
    l_rpn = l_rpn_cls + l_rpn_reg
    if want_grads:
        dp = np.zeros_like(probs)
        dp[valid] = focal_loss_grad(probs[valid], fg_anchor[valid], cfg_loss)
        dlogit = (dp * probs * (1.0 - probs))[:, None]
        grads["rpn_cls"], _ = models.rpn_cls.backward(cls_cache, dlogit)
        dreg = masked_smooth_l1_mean_grad(
            reg_out, world.anchor_reg_targets, fg_anchor, beta
        )
        grads["rpn_reg"], _ = models.rpn_reg.backward(reg_cache, dreg)

    # Refinement-stage loss over graph nodes.
    if world.graph is not None and len(world.graph):
        forward = (
            update_extended_forward
            if config.gnn.variant == "extended"
            else update_vanilla_forward
        )
        refined, ucache = forward(world.graph, models.updater)
        scores, residuals, hcache = header_forward(
            refined, models.cls_stack, models.reg_stack
        )
        l_gnn_cls = focal_loss(scores, world.prop_fg, cfg_loss)
        l_gnn_reg = masked_smooth_l1_mean(
            residuals, world.prop_reg_targets, world.prop_fg, beta
        )
        l_gnn = l_gnn_cls + l_gnn_reg
        if want_grads:
            dscores = focal_loss_grad(scores, world.prop_fg, cfg_loss)
            dres = masked_smooth_l1_mean_grad(
                residuals, world.prop_reg_targets, world.prop_fg, beta
            )
            cls_grads, reg_grads, dz = header_backward(
                hcache, models.cls_stack, models.reg_stack, dscores, dres
            )
            grads["cls_stack"] = cls_grads
            grads["reg_stack"] = reg_grads
            grads["updater"], _ = update_backward(ucache, dz)
    else:
        l_gnn = 0.0
        if want_grads:
            grads["cls_stack"] = models.cls_stack.zero_grads()
            grads["reg_stack"] = models.reg_stack.zero_grads()
            grads["updater"] = models.updater.zero_grads()

    # Point-wise auxiliary losses.
    if world.point_voxel_feats is not None and len(world.point_voxel_feats):
        feats = world.point_voxel_feats.features
        seg_out, seg_cache = models.aux_seg.forward(feats)
        seg_probs = _sigmoid(seg_out[:, 0])
        l_seg = focal_loss(seg_probs, world.aux_mask, cfg_loss)
        off_out, off_cache = models.aux_off.forward(feats)
        l_offset = offset_loss(off_out, world.aux_offsets, world.aux_mask, beta)
        if want_grads:
            dseg = focal_loss_grad(seg_probs, world.aux_mask, cfg_loss)
            dlogit = (dseg * seg_probs * (1.0 - seg_probs))[:, None]
            grads["aux_seg"], _ = models.aux_seg.backward(seg_cache, dlogit)
            doff = offset_loss_grad(off_out, world.aux_offsets, world.aux_mask, beta)
            grads["aux_off"], _ = models.aux_off.backward(off_cache, doff)
    else:
        l_seg = l_offset = 0.0
        if want_grads:
            grads["aux_seg"] = models.aux_seg.zero_grads()
            grads["aux_off"] = models.aux_off.zero_grads()

    components = {
        "l_rpn": l_rpn,
        "l_gnn": l_gnn,
        "l_offset": l_offset,
        "l_seg": l_seg,
        "total": total_loss(l_rpn, l_gnn, l_offset, l_seg),
    }
    return components, grads


def _apply_grads(models: PipelineModels, grads: dict[str, Any], lr: float) -> None:
    models.rpn_cls.sgd_step(grads["rpn_cls"], lr)
    models.rpn_reg.sgd_step(grads["rpn_reg"], lr)
    models.cls_stack.sgd_step(grads["cls_stack"], lr)
    models.reg_stack.sgd_step(grads["reg_stack"], lr)
    models.updater.sgd_step(grads["updater"], lr)
    models.aux_seg.sgd_step(grads["aux_seg"], lr)
    models.aux_off.sgd_step(grads["aux_off"], lr)


def _sum_grads(total: dict[str, Any] | None, extra: dict[str, Any]) -> dict[str, Any]:
    if total is None:
        return extra
    out: dict[str, Any] = {}
    for key, acc in total.items():
        new = extra[key]
        if key == "updater":
            out[key] = UpdaterGrads(
                [add_layer_grads(a, b) for a, b in zip(acc.agg, new.agg)],
                [add_layer_grads(a, b) for a, b in zip(acc.fus, new.fus)],
                None
                if acc.align is None
                else [add_layer_grads(a, b) for a, b in zip(acc.align, new.align)],
            )
        else:
            out[key] = add_layer_grads(acc, new)
    return out


def _batch_evaluate(
    models: PipelineModels, worlds: list[_World], config: PipelineConfig
) -> tuple[float, dict[str, Any]]:
    """Mean total loss and summed gradients over the training worlds."""
    grads = None
    total = 0.0
    for world in worlds:
        components, world_grads = _evaluate(models, world, config, want_grads=True)
        total += components["total"]
        grads = _sum_grads(grads, world_grads)
    return total / len(worlds), grads


def _training_worlds(config: PipelineConfig) -> list[_World]:
    return [
        _build_world(
            config,
            config.seed + _SCENE_STRIDE * j,
            config.seed + _SCENE_STRIDE * j + _PROPOSAL_OFFSET,
        )
        for j in range(config.train.batch_scenes)
    ]


def _train_models(config: PipelineConfig, steps: int) -> tuple[PipelineModels, list[float]]:
    worlds = _training_worlds(config)
    models = init_models(config)
    lr = config.train.learning_rate / len(worlds)
    history = []
    loss, grads = _batch_evaluate(models, worlds, config)
    history.append(loss)
    for _ in range(steps):
        _apply_grads(models, grads, lr)
        loss, grads = _batch_evaluate(models, worlds, config)
        history.append(loss)
    return models, history


def train_smoke(config: PipelineConfig, steps: int | None = None) -> list[float]:
    """Plain gradient descent on the summed losses over one fixed batch.

    Returns the total loss before training and after every step, so the
    history has ``steps + 1`` entries.  Zero steps report only the initial
    loss; a zero learning rate leaves the history constant.
    """
    if steps is None:
        steps = config.train.steps
    if steps < 0:
        raise ConfigError("steps must be non-negative")
    _, history = _train_models(config, steps)
    return history


def detect(
    models: PipelineModels, world: _World, config: PipelineConfig
) -> list[Box3D]:
    """Refine the world's proposals and suppress duplicates."""
    if world.graph is None or len(world.graph) == 0:
        return []
    if config.gnn.depth > 0:
        forward = (
            update_extended_forward
            if config.gnn.variant == "extended"
            else update_vanilla_forward
        )
        refined, _ = forward(world.graph, models.updater)
    else:
        refined = world.states
    boxes = refine_proposals(world.graph, refined, models.cls_stack, models.reg_stack)
    return nms(boxes, config.nms.iou_threshold, config.nms.score_threshold)


def _score_world(
    models: PipelineModels, world: _World, config: PipelineConfig
) -> tuple[list[Box3D], dict[str, float]]:
    detections = detect(models, world, config)
    gts = list(world.scene.gt_boxes)
    curve = precision_recall(detections, gts, BevIouMatcher(config.eval.ap_iou))
    return detections, {
        "ap_s11": interpolated_ap(curve, RecallSchedule.s11()),
        "ap_s40": interpolated_ap(curve, RecallSchedule.s40()),
        "n_detections": len(detections),
        "n_gt": len(gts),
        "n_proposals": len(world.proposals),
    }


def run_pipeline(config: PipelineConfig) -> tuple[list[Box3D], dict[str, Any]]:
    """Train (optionally), detect, and score the result.

    The headline AP is measured on the first training scene — the fixed
    batch the smoke-test losses descend on — so the K>0 versus K=0
    comparison isolates what refinement adds.  A held-out scene (fresh
    seed for both scene and proposal noise) is scored alongside under
    ``holdout_*`` keys.  When ``train.steps`` is zero the stacks keep
    their initial weights, which with ``header_init="zero"`` makes the
    refiner an exact passthrough.
    """
    if config.train.steps > 0:
        models, history = _train_models(config, config.train.steps)
    else:
        models = init_models(config)
        history = []

    world_main = _build_world(config, config.seed, config.seed + _PROPOSAL_OFFSET)
    detections, scores = _score_world(models, world_main, config)
    world_holdout = _build_world(
        config,
        config.seed + _EVAL_SCENE_OFFSET,
        config.seed + _EVAL_PROPOSAL_OFFSET,
    )
    _, holdout_scores = _score_world(models, world_holdout, config)

    report: dict[str, Any] = {"ap_iou": config.eval.ap_iou, **scores}
    report.update({f"holdout_{key}": value for key, value in holdout_scores.items()})
    report["loss_history"] = history
    if history:
        report["loss_first"] = history[0]
        report["loss_final"] = history[-1]
    return detections, report
