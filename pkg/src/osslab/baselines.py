"""FixMatch and supervised-only reference loops on a K-way head.

Both share augmentation, batching and update code with :mod:`osslab.scomatch`
so that differences in results come from the algorithm alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AugmentConfig, augment_strong, augment_weak
from .diffcore import Network, SgdConfig, softmax, softmax_cross_entropy
from .scomatch import (
    IterationReport,
    JointBatch,
    TrainState,
    apply_update,
    fixmatch_consistency_loss,
    init_state,
    pseudo_label_from_probs,
    pseudo_label_tally,
)


@dataclass
class FixMatchConfig:
    K: int
    B: int = 64
    mu: int = 7
    tau: float = 0.95
    lambda_u: float = 1.0
    alpha: float = 0.999

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


def init_fixmatch_state(cfg: FixMatchConfig, in_dim: int, seed: int, hidden=(128, 128),
                        sgd: SgdConfig | None = None) -> TrainState:
    return init_state(in_dim, cfg.K, seed, hidden, sgd)


def fixmatch_supervised_loss(model: Network, x_weak: np.ndarray, y: np.ndarray):
    """Mean CE on weak labeled views; returns ``(loss, grads)``."""
    model.zero_grad()
    loss, g = softmax_cross_entropy(model.logits(x_weak), y)
    model.backward(g)
    return loss, [a.copy() for a in model.grads()]


def fixmatch_unsupervised_loss(model: Network, u_weak: np.ndarray, u_strong: np.ndarray, tau: float):
    """Thresholded strong-view consistency; returns ``(loss, grads, accept_count)``."""
    pseudo = pseudo_label_from_probs(softmax(model.logits(u_weak)), tau)
    model.zero_grad()
    loss, g = fixmatch_consistency_loss(model.logits(u_strong), pseudo)
    model.backward(g)
    return loss, [a.copy() for a in model.grads()], pseudo.n_accept


def fixmatch_iteration(state: TrainState, x: np.ndarray, y: np.ndarray, u: np.ndarray,
                       cfg: FixMatchConfig, aug: AugmentConfig, u_truth=None) -> IterationReport:
    """One FixMatch step (single backward on ``L_s + lambda*L_u``); mutates ``state``."""
    student = state.student
    rng = state.rngs["augment"]
    xw = augment_weak(x, aug, rng)
    uw = augment_weak(u, aug, rng)
    us = augment_strong(u, aug, rng)

    probs_w = softmax(student.logits(uw))
    pseudo = pseudo_label_from_probs(probs_w, cfg.tau)

    jb = JointBatch(x=xw, us=us)
    student.zero_grad()
    logits = student.logits(jb.stacked())
    grad = np.zeros_like(logits)
    l_s, g = softmax_cross_entropy(jb.rows(logits, "x"), y)
    jb.rows(grad, "x")[...] += g
    l_u, g = fixmatch_consistency_loss(jb.rows(logits, "us"), pseudo)
    jb.rows(grad, "us")[...] += cfg.lambda_u * g
    total = l_s + cfg.lambda_u * l_u
    apply_update(state, grad, None, cfg.alpha)

    correct, wrong = pseudo_label_tally(pseudo, u_truth)
    return IterationReport(
        iteration=state.iteration,
        loss_total=total,
        loss_sup_id=l_s,
        loss_close=l_u,
        n_accept_id=pseudo.n_accept,
        pseudo_correct=correct,
        pseudo_wrong=wrong,
    )


def supervised_only_iteration(state: TrainState, x: np.ndarray, y: np.ndarray,
                              aug: AugmentConfig, alpha: float = 0.999) -> IterationReport:
    """Weak-view CE on labeled data only."""
    student = state.student
    xw = augment_weak(x, aug, state.rngs["augment"])
    student.zero_grad()
    loss, g = softmax_cross_entropy(student.logits(xw), y)
    apply_update(state, g, None, alpha)
    return IterationReport(iteration=state.iteration, loss_total=loss, loss_sup_id=loss)
