"""Temperature-scaled symmetric contrastive loss with a learnable log-temperature."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Graph, Tensor, as_tensor, backward, finite_diff_gradient, ops, relative_error

TAU_MAX_DEFAULT = 100.0
# ceiling listed for Multi(32, 16) in the large-scale hyperparameter table
TAU_MAX_MULTI_PRESET = 3.95
T_INIT_PRESETS = (0.0, 2.64, 5.31)


class BatchTooSmall(ValueError):
    pass


def default_tau_max(m: int = 1, multi_token: bool = False) -> float:
    """100 for single-token heads, 100 / m when every sub-sphere has its own token."""
    return TAU_MAX_DEFAULT / m if multi_token else TAU_MAX_DEFAULT


@dataclass
class TemperatureParam:
    """Log-temperature ``t`` with effective scale ``tau = min(exp(t), tau_max)``."""

    t: float = 0.0
    tau_max: float = TAU_MAX_DEFAULT
    learnable: bool = True

    def __post_init__(self):
        if not self.tau_max > 0:
            raise ValueError("tau_max must be positive")

    @property
    def tau(self) -> float:
        return min(math.exp(self.t), self.tau_max)


@dataclass
class LossOutput:
    loss: Tensor
    logits: Tensor
    mean_pos_dist: float
    mean_neg_dist: float
    t: Optional[Tensor] = None

    @property
    def mean_pos_neg_dist(self) -> tuple[float, float]:
        return self.mean_pos_dist, self.mean_neg_dist

    @property
    def value(self) -> float:
        return self.loss.item()


def symmetric_cross_entropy(logits: Tensor) -> Tensor:
    """Mean of row-wise and column-wise cross-entropy with the diagonal as targets."""
    b = logits.shape[0]
    eye = Tensor(np.eye(b))
    rows = ops.sum(ops.mul(ops.log_softmax(logits, axis=1), eye))
    cols = ops.sum(ops.mul(ops.log_softmax(logits, axis=0), eye))
    return ops.scalar_mul(ops.add(rows, cols), -0.5 / b)


def scaled_logits(neg_dist: Tensor, t: Tensor, tau_max: float) -> Tensor:
    """``neg_dist * min(exp(t), tau_max)`` with ``t`` a scalar tensor."""
    return ops.scalar_mul(neg_dist, ops.clamp_max(ops.exp(t), tau_max))


def contrastive_loss(neg_dist, temp: TemperatureParam, graph: Optional[Graph] = None) -> LossOutput:
    """Average of image-to-text and text-to-image cross-entropy over in-batch pairs.

    Row ``i`` of ``neg_dist`` scores image ``i`` against every text; the
    matching text is on the diagonal. When ``temp.learnable`` is set, ``t``
    becomes a leaf on the graph of ``neg_dist`` (or ``graph``) and is returned
    as ``LossOutput.t`` for gradient lookup.
    """
    neg_dist = as_tensor(neg_dist)
    if neg_dist.ndim != 2 or neg_dist.shape[0] != neg_dist.shape[1]:
        raise ValueError(f"neg_dist must be square, got shape {neg_dist.shape}")
    b = neg_dist.shape[0]
    if b < 2:
        raise BatchTooSmall(f"contrastive loss needs at least 2 pairs, got {b}")
    if not np.all(np.isfinite(neg_dist.data)):
        raise ValueError("neg_dist contains non-finite values")

    t_leaf = None
    if temp.learnable:
        g = neg_dist.graph or graph or Graph()
        t_leaf = g.leaf(np.array(temp.t))
        logits = scaled_logits(neg_dist, t_leaf, temp.tau_max)
    else:
        logits = ops.scalar_mul(neg_dist, temp.tau)
    loss = symmetric_cross_entropy(logits)

    d = -neg_dist.data
    off = ~np.eye(b, dtype=bool)
    return LossOutput(loss, logits, float(np.mean(np.diag(d))), float(np.mean(d[off])), t_leaf)


def infonce_oracle(pos_dists: Sequence[float], neg_dists_per_anchor: Sequence[Sequence[float]],
                   tau: float, include_positive: bool = False) -> float:
    """Mean over anchors of ``-log(exp(-tau d+) / N)`` with ``N`` summed over negatives.

    ``neg_dists_per_anchor[i]`` lists every negative of anchor ``i`` (image side
    and text side together). With ``include_positive`` the positive term is
    added to ``N`` as in the usual InfoNCE denominator.
    """
    if len(pos_dists) != len(neg_dists_per_anchor) or not pos_dists:
        raise ValueError("need one list of negatives per anchor")
    total = 0.0
    for dp, negs in zip(pos_dists, neg_dists_per_anchor):
        if len(negs) == 0:
            raise ValueError("every anchor needs at least one negative")
        # log-sum-exp shifted by the largest exponent
        exps = [-tau * d for d in negs] + ([-tau * dp] if include_positive else [])
        top = max(exps)
        log_n = top + math.log(math.fsum(math.exp(e - top) for e in exps))
        total += -(-tau * dp - log_n)
    return total / len(pos_dists)


def loss_and_t_grad(neg_dist, temp: TemperatureParam) -> tuple[float, float]:
    out = contrastive_loss(as_tensor(np.asarray(getattr(neg_dist, "data", neg_dist))), temp, graph=Graph())
    backward(out.t.graph, out.loss)
    return out.value, float(out.t.graph.grad(out.t))


def temperature_grad_check(temp: TemperatureParam, neg_dist, h: float = 1e-6) -> float:
    """Relative error between analytic dLoss/dt and central differences."""
    if not temp.learnable:
        raise ValueError("temperature must be learnable")
    nd = np.asarray(getattr(neg_dist, "data", neg_dist), dtype=np.float64)
    _, analytic = loss_and_t_grad(nd, temp)

    def f(t):
        p = TemperatureParam(float(t[0]), temp.tau_max, learnable=False)
        return contrastive_loss(Tensor(nd), p).value

    numeric = finite_diff_gradient(f, np.array([temp.t]), h)[0]
    return relative_error([analytic], [numeric])
