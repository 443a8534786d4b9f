"""Small dense networks with hand-written gradients, plus the detection losses.

There is no autodiff here: every forward has a matching analytic
backward, which keeps the whole training path checkable against central
finite differences.  Stacks operate on single vectors or on row-batched
matrices; gradients accumulate over the batch.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

_ACTIVATIONS = ("relu", "none")

# One layer's gradient: (dW, db) matching the layer's weight and bias shapes.
LayerGrads = tuple[np.ndarray, np.ndarray]


@dataclass
class DenseLayer:
    """Affine map followed by an optional ReLU.

    ``weight`` is (out, in) and ``bias`` (out,).  The ReLU subgradient at
    exactly zero is taken as zero.
    """

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}"
            )
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


class DenseStack:
    """A sequence of dense layers with explicit forward/backward passes."""

    def __init__(self, layers: list[DenseLayer]):
        if not layers:
            raise ValueError("a stack needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise ValueError(
                    f"layer widths do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        self.layers = layers

    @classmethod
    def seeded(
        cls,
        dims: list[int] | tuple[int, ...],
        seed: int,
        activations: list[str] | None = None,
    ) -> "DenseStack":
        """Build a stack with uniform +-sqrt(6 / (fan_in + fan_out)) weights.

        ``dims`` lists layer widths input-first, e.g. (8, 16, 4) makes two
        layers.  Activations default to ReLU on every layer except the
        last, which is linear.
        """
        if len(dims) < 2:
            raise ValueError("dims must list at least input and output width")
        n_layers = len(dims) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["none"]
        if len(activations) != n_layers:
            raise ValueError("one activation per layer is required")
        rng = np.random.default_rng(seed)
        layers = []
        for i in range(n_layers):
            fan_in, fan_out = dims[i], dims[i + 1]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(DenseLayer(weight, np.zeros(fan_out), activations[i]))
        return cls(layers)

    @classmethod
    def zeros(
        cls,
        dims: list[int] | tuple[int, ...],
        activations: list[str] | None = None,
    ) -> "DenseStack":
        """All-zero weights and biases; handy as an identity-residual stub."""
        if len(dims) < 2:
            raise ValueError("dims must list at least input and output width")
        n_layers = len(dims) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["none"]
        layers = [
            DenseLayer(np.zeros((dims[i + 1], dims[i])), np.zeros(dims[i + 1]), activations[i])
            for i in range(n_layers)
        ]
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def copy(self) -> "DenseStack":
        return DenseStack(
            [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Evaluate the stack, returning the output and a backward cache."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[1] != self.in_dim:
            raise ValueError(f"input width {h.shape[1]} != stack width {self.in_dim}")
        cache = [("squeeze", squeeze)]
        for layer in self.layers:
            pre = h @ layer.weight.T + layer.bias
            cache.append((h, pre))
            h = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
        out = h[0] if squeeze else h
        return out, cache

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Evaluate without keeping the cache."""
        return self.forward(x)[0]

    def backward(self, cache: list, grad_out: np.ndarray) -> tuple[list[LayerGrads], np.ndarray]:
        """Back-propagate an upstream gradient through the cached forward.

        Returns per-layer (dW, db) pairs (input-first order) and the
        gradient with respect to the stack input, shaped like it.
        """
        _, squeeze = cache[0]
        g = np.asarray(grad_out, dtype=float)
        g = g[None, :] if squeeze else g
        grads: list[LayerGrads] = [None] * len(self.layers)  # type: ignore[list-item]
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            h_in, pre = cache[idx + 1]
            if layer.activation == "relu":
                g = g * (pre > 0.0)
            grads[idx] = (g.T @ h_in, g.sum(axis=0))
            g = g @ layer.weight
        return grads, (g[0] if squeeze else g)

    def zero_grads(self) -> list[LayerGrads]:
        return [(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in self.layers]

    def sgd_step(self, grads: list[LayerGrads], lr: float) -> None:
        """In-place gradient-descent update."""
        for layer, (dw, db) in zip(self.layers, grads):
            layer.weight -= lr * dw
            layer.bias -= lr * db

    # Flat parameter views, used by finite-difference checks and checkpoint dumps.

    def flat_params(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([l.weight.ravel(), l.bias.ravel()]) for l in self.layers]
        )

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        offset = 0
        for layer in self.layers:
            n_w = layer.weight.size
            layer.weight = flat[offset : offset + n_w].reshape(layer.weight.shape).copy()
            offset += n_w
            n_b = layer.bias.size
            layer.bias = flat[offset : offset + n_b].copy()
            offset += n_b
        if offset != flat.size:
            raise ValueError(f"expected {offset} parameters, got {flat.size}")

    def flat_grads(self, grads: list[LayerGrads]) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([dw.ravel(), db.ravel()]) for dw, db in grads]
        )

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)


def add_layer_grads(acc: list[LayerGrads], extra: list[LayerGrads]) -> list[LayerGrads]:
    """Element-wise sum of two per-layer gradient lists."""
    return [(aw + bw, ab + bb) for (aw, ab), (bw, bb) in zip(acc, extra)]


@dataclass(frozen=True)
class LossConfig:
    """Shared loss hyper-parameters."""

    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    focal_background: bool = True  # include the background focal term

    def __post_init__(self) -> None:
        if not 0.0 < self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must lie in (0, 1]")
        if self.focal_gamma < 0.0:
            raise ValueError("focal_gamma must be non-negative")
        if self.smooth_l1_beta <= 0.0:
            raise ValueError("smooth_l1_beta must be positive")


def smooth_l1(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> float:
    """Summed smooth-L1: 0.5 x^2 / beta inside the kink, |x| - beta/2 outside."""
    x = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    ax = np.abs(x)
    per = np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)
    return float(per.sum())


def smooth_l1_grad(pred: np.ndarray, target: np.ndarray, beta: float = 1.0) -> np.ndarray:
    """d(smooth_l1)/d(pred), elementwise."""
    x = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


_P_CLAMP = (1e-7, 1.0 - 1e-7)


def focal_loss(
    probs: np.ndarray,
    foreground: np.ndarray,
    config: LossConfig = LossConfig(),
) -> float:
    """Foreground-normalised focal classification loss.

    Averages ``-alpha (1 - p)^gamma log p`` over foreground entries,
    normalised by the foreground count.  With ``config.focal_background``
    the background entries add ``-(1 - alpha) p^gamma log(1 - p)`` into
    the same normalised sum.  Probabilities are clamped to
    [1e-7, 1 - 1e-7]; with no foreground the loss is zero and a warning
    is emitted.
    """
    p = np.clip(np.asarray(probs, dtype=float), *_P_CLAMP)
    fg = np.asarray(foreground, dtype=bool)
    if p.shape != fg.shape:
        raise ValueError(f"probs shape {p.shape} != mask shape {fg.shape}")
    n_pos = int(fg.sum())
    if n_pos == 0:
        warnings.warn("focal_loss: no foreground entries, returning 0", RuntimeWarning)
        return 0.0
    alpha, gamma = config.focal_alpha, config.focal_gamma
    total = float((-alpha * (1.0 - p[fg]) ** gamma * np.log(p[fg])).sum())
    if config.focal_background:
        q = p[~fg]
        total += float((-(1.0 - alpha) * q**gamma * np.log(1.0 - q)).sum())
    return total / n_pos


def focal_loss_grad(
    probs: np.ndarray,
    foreground: np.ndarray,
    config: LossConfig = LossConfig(),
) -> np.ndarray:
    """d(focal_loss)/d(probs); zero where the clamp is active or loss is zero."""
    p_raw = np.asarray(probs, dtype=float)
    fg = np.asarray(foreground, dtype=bool)
    n_pos = int(fg.sum())
    grad = np.zeros_like(p_raw)
    if n_pos == 0:
        return grad
    active = (p_raw > _P_CLAMP[0]) & (p_raw < _P_CLAMP[1])
    p = np.clip(p_raw, *_P_CLAMP)
    alpha, gamma = config.focal_alpha, config.focal_gamma
    one_m = 1.0 - p
    fg_grad = alpha * (gamma * one_m ** (gamma - 1.0) * np.log(p) - one_m**gamma / p)
    grad[fg] = fg_grad[fg]
    if config.focal_background:
        bg_grad = (1.0 - alpha) * (
            -gamma * p ** (gamma - 1.0) * np.log(1.0 - p) + p**gamma / one_m
        )
        grad[~fg] = bg_grad[~fg]
    grad[~active] = 0.0
    return grad / n_pos


def masked_smooth_l1_mean(
    pred: np.ndarray, target: np.ndarray, mask: np.ndarray, beta: float = 1.0
) -> float:
    """Smooth-L1 summed over masked rows, divided by the masked row count."""
    n_pos = int(np.asarray(mask, dtype=bool).sum())
    if n_pos == 0:
        return 0.0
    return smooth_l1(pred[mask], target[mask], beta) / n_pos


def masked_smooth_l1_mean_grad(
    pred: np.ndarray, target: np.ndarray, mask: np.ndarray, beta: float = 1.0
) -> np.ndarray:
    """d(masked_smooth_l1_mean)/d(pred); zero on unmasked rows."""
    mask = np.asarray(mask, dtype=bool)
    grad = np.zeros_like(np.asarray(pred, dtype=float))
    n_pos = int(mask.sum())
    if n_pos == 0:
        return grad
    grad[mask] = smooth_l1_grad(pred[mask], target[mask], beta) / n_pos
    return grad


def offset_loss(
    pred_offsets: np.ndarray,
    gt_offsets: np.ndarray,
    in_box_mask: np.ndarray,
    beta: float = 1.0,
) -> float:
    """Mean smooth-L1 over the offset rows of in-box points.

    Rows outside the mask contribute nothing; with no in-box points the
    loss is zero.
    """
    pred = np.asarray(pred_offsets, dtype=float)
    gt = np.asarray(gt_offsets, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"offset shapes differ: {pred.shape} vs {gt.shape}")
    return masked_smooth_l1_mean(pred, gt, in_box_mask, beta)


def offset_loss_grad(
    pred_offsets: np.ndarray,
    gt_offsets: np.ndarray,
    in_box_mask: np.ndarray,
    beta: float = 1.0,
) -> np.ndarray:
    """d(offset_loss)/d(pred_offsets)."""
    pred = np.asarray(pred_offsets, dtype=float)
    gt = np.asarray(gt_offsets, dtype=float)
    return masked_smooth_l1_mean_grad(pred, gt, in_box_mask, beta)


def total_loss(l_rpn: float, l_gnn: float, l_offset: float, l_seg: float) -> float:
    """Unweighted sum of the four training terms."""
    return float(l_rpn) + float(l_gnn) + float(l_offset) + float(l_seg)
