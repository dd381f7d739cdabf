"""Loss formulas and the normalized cross-entropy evaluation metric.

These are the plain-array reference forms used for reporting and holdout
evaluation; the training path builds the same formulas on the autodiff tape
(see model.py) and the test suite checks the two against each other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_CLIP = 1e-7


class DegenerateLabelsError(ValueError):
    """Holdout labels are all-positive or all-negative; NE is undefined."""


@dataclass
class LossWeights:
    task: tuple  # w_t per task
    conformity: float
    relevance: float

    def __post_init__(self):
        if any(w < 0 for w in self.task) or self.conformity < 0 or self.relevance < 0:
            raise ValueError("loss weights must be >= 0")
        if not any(w > 0 for w in self.task):
            raise ValueError("at least one task weight must be > 0")


@dataclass
class LossReport:
    task: tuple  # L_t per task
    conformity: float
    relevance: float
    total: float
    batch_size: int


def clip_probs(p) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)


def bce(p, y) -> float:
    """Batch-mean binary cross-entropy with clipped probabilities."""
    p = clip_probs(p)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


task_loss = bce


def conformity_loss(c_bar, u_hat, i_hat, squared: bool = False) -> float:
    """Batch mean of |c - |u_hat + i_hat||, the combined-conformity residual."""
    resid = np.abs(np.asarray(c_bar, dtype=np.float64)
                   - np.abs(np.asarray(u_hat) + np.asarray(i_hat)))
    if squared:
        resid = resid**2
    return float(np.mean(resid))


def relevance_loss(r_bar, u_x, i_x, squared: bool = False) -> float:
    """Batch mean over events of sum_x |r_x - u_x * i_x| across interests."""
    r_bar = np.atleast_2d(np.asarray(r_bar, dtype=np.float64))
    u_x = np.atleast_2d(np.asarray(u_x, dtype=np.float64))
    i_x = np.atleast_2d(np.asarray(i_x, dtype=np.float64))
    if r_bar.shape != u_x.shape or u_x.shape != i_x.shape:
        raise ValueError(
            f"interest vectors disagree: {r_bar.shape}, {u_x.shape}, {i_x.shape}"
        )
    resid = np.abs(r_bar - u_x * i_x)
    if squared:
        resid = resid**2
    return float(np.mean(resid.sum(axis=1)))


def total_loss(task_losses, l_conf: float, l_rel: float, weights: LossWeights) -> float:
    if len(task_losses) != len(weights.task):
        raise ValueError(
            f"{len(task_losses)} task losses for {len(weights.task)} weights"
        )
    total = sum(w * l for w, l in zip(weights.task, task_losses))
    return float(total + weights.conformity * l_conf + weights.relevance * l_rel)


def mixture_decomposition(p_conf, p_rel, w1: float, w2: float):
    """Pr(t) = w1 * Pr(t|Conformity) + w2 * Pr(t|Relevance)."""
    return w1 * np.asarray(p_conf, dtype=np.float64) + w2 * np.asarray(p_rel, dtype=np.float64)


def normalized_cross_entropy(predictions, labels) -> float:
    """Mean BCE over the log loss of the constant base-rate predictor.

    Lower is better; 1.0 means no lift over predicting the label mean.
    """
    y = np.asarray(labels, dtype=np.float64)
    base_rate = y.mean()
    if base_rate <= 0.0 or base_rate >= 1.0:
        raise DegenerateLabelsError(
            f"label mean {base_rate} leaves the base-rate entropy degenerate"
        )
    return bce(predictions, y) / bce(np.full_like(y, base_rate), y)
