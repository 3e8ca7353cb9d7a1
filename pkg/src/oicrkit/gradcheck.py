"""Central finite-difference checks for the composed loss."""

from __future__ import annotations

import numpy as np

from .geometry import Box
from .netcore import DenseLayer, ModelParams, dense_apply, relu
from .oicr import OicrConfig, loss_value, total_loss
from .synthdata import Bag


# central differences straddling a ReLU kink measure nothing useful
KINK_MARGIN = 1e-3


def near_kink(bag, params: ModelParams, margin: float = KINK_MARGIN) -> bool:
    pre1 = dense_apply(params.trunk1, bag.features.T)
    pre2 = dense_apply(params.trunk2, relu(pre1))
    return bool(np.abs(pre1).min() < margin or np.abs(pre2).min() < margin)


def random_instance(rng: np.random.Generator, num_classes=3, proposals=7, feature_dim=8,
                    hidden=8, refinements=2, weight_scale=0.7, avoid_kinks=True):
    """A small bag and model with weights large enough to exercise every path.

    With ``avoid_kinks`` the draw is repeated (continuing the same stream)
    until no trunk pre-activation lies within ``KINK_MARGIN`` of zero.
    """
    while True:
        bag, params = _draw_instance(rng, num_classes, proposals, feature_dim, hidden,
                                     refinements, weight_scale)
        if not (avoid_kinks and near_kink(bag, params)):
            return bag, params


def _draw_instance(rng, num_classes, proposals, feature_dim, hidden, refinements, weight_scale):
    def layer(n_out, n_in):
        return DenseLayer(rng.normal(0.0, weight_scale, (n_out, n_in)), rng.normal(0.0, 0.3, n_out))

    params = ModelParams(layer(hidden, feature_dim), layer(hidden, hidden),
                         layer(num_classes, hidden), layer(num_classes, hidden),
                         [layer(num_classes + 1, hidden) for _ in range(refinements)])
    xy = rng.uniform(0, 50, size=(proposals, 2))
    wh = rng.uniform(5, 30, size=(proposals, 2))
    boxes = [Box(*map(float, (x, y, x + w, y + h))) for (x, y), (w, h) in zip(xy, wh)]
    label = np.zeros(num_classes, dtype=np.int64)
    label[rng.choice(num_classes, size=int(rng.integers(1, num_classes + 1)), replace=False)] = 1
    bag = Bag(0, boxes, rng.normal(size=(proposals, feature_dim)), label)
    return bag, params


def numeric_grads(bag, params: ModelParams, cfg: OicrConfig, plan, h: float = 1e-4):
    grads = {}
    for name, layer in params.named_layers():
        pair = []
        for tensor in (layer.weights, layer.bias):
            g = np.zeros_like(tensor)
            flat, gflat = tensor.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = loss_value(bag, params, cfg, plan)
                flat[i] = old - h
                fm = loss_value(bag, params, cfg, plan)
                flat[i] = old
                gflat[i] = (fp - fm) / (2 * h)
            pair.append(g)
        grads[name] = tuple(pair)
    return grads


# some tensors have an identically zero gradient (the detection-stream bias
# shifts a whole softmax row); the floor keeps roundoff there from reading as error
SCALE_FLOOR = 1e-4


def max_relative_error(analytic, numeric) -> float:
    """Largest per-tensor error, each scaled by the tensor's gradient magnitude."""
    worst = 0.0
    for name in analytic:
        for a, n in zip(analytic[name], numeric[name]):
            scale = max(np.max(np.abs(a)), np.max(np.abs(n)), SCALE_FLOOR)
            worst = max(worst, float(np.max(np.abs(a - n)) / scale))
    return worst


def check_instance(seed: int, h: float = 1e-4, **kwargs) -> float:
    rng = np.random.Generator(np.random.PCG64(seed))
    bag, params = random_instance(rng, **kwargs)
    cfg = OicrConfig(refinements=len(params.refine), iou_threshold=0.5)
    _, analytic, plan = total_loss(bag, params, cfg)
    return max_relative_error(analytic, numeric_grads(bag, params, cfg, plan, h))
