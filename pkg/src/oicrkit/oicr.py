"""Online instance classifier refinement.

K extra (C+1)-way classifiers share the trunk with the MIDN head. Each one
is supervised by pseudo labels built from the previous stage's proposal
scores: the top proposal of every present class, plus every proposal that
overlaps it by more than ``iou_threshold``, is labelled with that class and
everything else is background. Per-proposal loss weights are the score of
the top proposal that claimed it.

Supervision is recomputed on every forward pass and treated as a constant
during backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import iou_matrix
from .midn import MidnOutput, loss_base, midn_forward
from .netcore import (Grads, ModelParams, dense_apply, dense_grad, relu, relu_grad,
                      softmax_columns, softmax_columns_grad, softmax_rows_grad)

PROB_FLOOR = 1e-12


@dataclass
class OicrConfig:
    refinements: int = 3
    iou_threshold: float = 0.5
    weighted: bool = True

    def __post_init__(self):
        if self.refinements < 0:
            raise ValueError("refinements must be >= 0")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")


@dataclass
class SupervisionPlan:
    labels: list[np.ndarray]  # per stage, (C+1, R) one-hot columns
    weights: list[np.ndarray]  # per stage, (R,)


@dataclass
class ForwardState:
    inputs: np.ndarray  # (D, R)
    pre1: np.ndarray
    h1: np.ndarray
    pre2: np.ndarray
    h2: np.ndarray  # trunk features (H, R)
    midn: MidnOutput
    refined: list[np.ndarray] = field(default_factory=list)  # (C+1, R) softmaxed

    def stage_scores(self) -> list[np.ndarray]:
        """Score matrices x^{R0}..x^{RK}; stage 0 is the MIDN output."""
        return [self.midn.x_r0] + self.refined


@dataclass
class LossBreakdown:
    total: float
    base: float
    refine: list[float]


def trunk_forward(features: np.ndarray, params: ModelParams):
    """``features`` is ``(R, D)`` as stored in a bag."""
    x = np.asarray(features, dtype=np.float64).T
    pre1 = dense_apply(params.trunk1, x)
    h1 = relu(pre1)
    pre2 = dense_apply(params.trunk2, h1)
    return x, pre1, h1, pre2, relu(pre2)


def refine_forward(trunk_features: np.ndarray, params: ModelParams, refinements: int) -> list[np.ndarray]:
    if refinements > len(params.refine):
        raise ValueError(f"model has {len(params.refine)} refinement branches, {refinements} requested")
    return [softmax_columns(dense_apply(params.refine[k], trunk_features)) for k in range(refinements)]


def forward(features: np.ndarray, params: ModelParams, refinements: int | None = None) -> ForwardState:
    if refinements is None:
        refinements = len(params.refine)
    x, pre1, h1, pre2, h2 = trunk_forward(features, params)
    return ForwardState(x, pre1, h1, pre2, h2, midn_forward(h2, params),
                        refine_forward(h2, params, refinements))


def top_proposal(scores_prev: np.ndarray, class_index: int) -> int:
    """Index of the highest-scoring proposal for a 1-based class; ties go low."""
    # np.argmax returns the first maximum
    return int(np.argmax(scores_prev[class_index - 1]))


def generate_supervision(proposals: np.ndarray, label: np.ndarray, stage_scores: list[np.ndarray],
                         cfg: OicrConfig) -> SupervisionPlan:
    """Pseudo labels and loss weights for stages 1..K.

    ``stage_scores[k]`` holds the scores of stage k; only rows 1..C are
    searched, so a background row on refined stages is ignored. Comparisons
    are strict: IoU equal to the threshold stays background, and when two
    classes give a proposal the same IoU the earlier class keeps it.
    """
    label = np.asarray(label)
    positives = [int(c) + 1 for c in np.flatnonzero(label)]
    if not positives:
        raise ValueError("bag has no positive class; supervision weights are undefined")
    num_classes = label.shape[0]
    n = proposals.shape[0]
    overlaps = iou_matrix(proposals, proposals)

    labels, weights = [], []
    for k in range(cfg.refinements):
        scores = stage_scores[k]
        best = np.full(n, -np.inf)
        w = np.zeros(n)
        assign = np.full(n, num_classes)  # 0-based row; C is background
        for c in positives:
            j = top_proposal(scores, c)
            cand = overlaps[:, j]
            better = cand > best
            best = np.where(better, cand, best)
            w = np.where(better, scores[c - 1, j], w)
            assign = np.where(better & (best > cfg.iou_threshold), c - 1, assign)
        y = np.zeros((num_classes + 1, n))
        y[assign, np.arange(n)] = 1.0
        labels.append(y)
        weights.append(w)
    return SupervisionPlan(labels, weights)


def loss_refine(probs: np.ndarray, labels: np.ndarray, weights: np.ndarray | None,
                weighted: bool = True) -> tuple[float, np.ndarray]:
    """Weighted per-proposal cross entropy on one refined stage.

    Returns the loss and its gradient with respect to the stage's logits.
    With ``weighted=False`` every proposal weight is 1.
    """
    n = probs.shape[1]
    w = np.asarray(weights, dtype=np.float64) if weighted else np.ones(n)
    floored = np.maximum(probs, PROB_FLOOR)
    coef = w[None, :] * labels / n
    loss = -float(np.sum(coef * np.log(floored)))
    grad_probs = np.where(probs > PROB_FLOOR, -coef / floored, 0.0)
    return loss, softmax_columns_grad(probs, grad_probs)


def plan_for(state: ForwardState, proposals: np.ndarray, label: np.ndarray,
             cfg: OicrConfig) -> SupervisionPlan:
    return generate_supervision(proposals, label, state.stage_scores(), cfg)


def total_loss(bag, params: ModelParams, cfg: OicrConfig,
               plan: SupervisionPlan | None = None) -> tuple[LossBreakdown, Grads, SupervisionPlan]:
    """Combined MIDN + refinement loss and analytic gradients for one bag.

    Pass ``plan`` to reuse a frozen supervision plan instead of deriving one
    from this forward pass.
    """
    state = forward(bag.features, params, cfg.refinements)
    if plan is None:
        plan = plan_for(state, bag.proposal_array(), bag.label, cfg)
    return backward(state, bag.label, plan, params, cfg) + (plan,)


def backward(state: ForwardState, label: np.ndarray, plan: SupervisionPlan,
             params: ModelParams, cfg: OicrConfig) -> tuple[LossBreakdown, Grads]:
    m = state.midn
    h2 = state.h2
    grads: Grads = {}

    base, d_phi = loss_base(m.phi, label)
    d_xr0 = np.broadcast_to(d_phi[:, None], m.x_r0.shape)
    d_xc = softmax_columns_grad(m.s_c, d_xr0 * m.s_d)
    d_xd = softmax_rows_grad(m.s_d, d_xr0 * m.s_c)
    gw, gb, d_h2 = dense_grad(params.stream_c, h2, d_xc)
    grads["stream_c"] = (gw, gb)
    gw, gb, d_h2_d = dense_grad(params.stream_d, h2, d_xd)
    grads["stream_d"] = (gw, gb)
    d_h2 = d_h2 + d_h2_d

    refine_losses = []
    for k in range(cfg.refinements):
        lk, d_logits = loss_refine(state.refined[k], plan.labels[k], plan.weights[k], cfg.weighted)
        refine_losses.append(lk)
        gw, gb, d_in = dense_grad(params.refine[k], h2, d_logits)
        grads[f"refine{k + 1}"] = (gw, gb)
        d_h2 = d_h2 + d_in
    for k in range(cfg.refinements, len(params.refine)):
        layer = params.refine[k]
        grads[f"refine{k + 1}"] = (np.zeros_like(layer.weights), np.zeros_like(layer.bias))

    d_pre2 = relu_grad(state.pre2, d_h2)
    gw, gb, d_h1 = dense_grad(params.trunk2, state.h1, d_pre2)
    grads["trunk2"] = (gw, gb)
    d_pre1 = relu_grad(state.pre1, d_h1)
    gw, gb, _ = dense_grad(params.trunk1, state.inputs, d_pre1)
    grads["trunk1"] = (gw, gb)

    total = base + sum(refine_losses)
    return LossBreakdown(total, base, refine_losses), grads


def loss_value(bag, params: ModelParams, cfg: OicrConfig, plan: SupervisionPlan) -> float:
    """Scalar loss under a fixed plan; used by finite-difference checks."""
    state = forward(bag.features, params, cfg.refinements)
    base, _ = loss_base(state.midn.phi, bag.label)
    refine = sum(loss_refine(state.refined[k], plan.labels[k], plan.weights[k], cfg.weighted)[0]
                 for k in range(cfg.refinements))
    return base + refine
