"""Two-stream multiple instance detection head and its image-level loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netcore import dense_apply, softmax_columns, softmax_rows

PHI_EPS = 1e-6


@dataclass
class MidnOutput:
    x_c: np.ndarray  # (C, R) classification-stream logits
    x_d: np.ndarray  # (C, R) detection-stream logits
    s_c: np.ndarray  # softmax over classes
    s_d: np.ndarray  # softmax over proposals
    x_r0: np.ndarray  # proposal scores, s_c * s_d
    phi: np.ndarray  # (C,) image scores


def midn_forward(trunk_features: np.ndarray, params) -> MidnOutput:
    if params.stream_c.shape[0] < 2:
        raise ValueError("the two-stream head needs at least two classes")
    if trunk_features.shape[1] < 1:
        raise ValueError("bag has no proposals")
    x_c = dense_apply(params.stream_c, trunk_features)
    x_d = dense_apply(params.stream_d, trunk_features)
    s_c = softmax_columns(x_c)
    s_d = softmax_rows(x_d)
    x_r0 = s_c * s_d
    return MidnOutput(x_c, x_d, s_c, s_d, x_r0, x_r0.sum(axis=1))


def loss_base(phi: np.ndarray, label: np.ndarray) -> tuple[float, np.ndarray]:
    """Multi-label binary cross entropy on image scores.

    ``phi`` is clamped to ``[eps, 1 - eps]`` first; the gradient is that of
    the clamped expression, so it vanishes where the clamp is active.
    """
    y = np.asarray(label, dtype=np.float64)
    p = np.clip(phi, PHI_EPS, 1.0 - PHI_EPS)
    loss = -np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    inside = (phi > PHI_EPS) & (phi < 1.0 - PHI_EPS)
    grad = np.where(inside, -y / p + (1.0 - y) / (1.0 - p), 0.0)
    return float(loss), grad
