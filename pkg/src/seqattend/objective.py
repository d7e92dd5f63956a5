"""Termination-weighted reconstruction cost and the variational bound."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import Trace
from .ndcore import GaussianParams, Tensor


@dataclass
class CostWeights:
    weights: tuple[float, ...]
    warmup: int
    poisson_rate: float

    def __len__(self):
        return len(self.weights)

    def as_tensor(self, dtype=torch.float64) -> Tensor:
        return torch.tensor(self.weights, dtype=dtype)


def default_rate(horizon: int, warmup: int) -> float:
    return 0.75 * (horizon - warmup)


def poisson_weights(rate: float | None, horizon: int, warmup: int) -> CostWeights:
    """Per-step weights from a Poisson termination time counted from ``warmup``.

    ``w[t]`` is proportional to ``Poisson(t - warmup; rate)`` for
    ``warmup <= t < horizon`` and zero before; the truncated mass is
    renormalized to one.  ``rate=None`` picks ``0.75 * (horizon - warmup)``.
    """
    if not 0 <= warmup < horizon:
        raise ValueError(f"need 0 <= warmup < horizon, got warmup={warmup}, horizon={horizon}")
    if rate is None:
        rate = default_rate(horizon, warmup)
    if rate <= 0:
        raise ValueError("poisson rate must be positive")
    log_pmf = [k * math.log(rate) - rate - math.lgamma(k + 1) for k in range(horizon - warmup)]
    top = max(log_pmf)
    mass = [math.exp(v - top) for v in log_pmf]
    total = math.fsum(mass)
    weights = (0.0,) * warmup + tuple(m / total for m in mass)
    return CostWeights(weights, warmup, float(rate))


def _check_shapes(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def reconstruction_nll(belief: Tensor, target: Tensor) -> Tensor:
    """Bernoulli cross-entropy summed over the last two (pixel) axes."""
    _check_shapes(belief, target, "reconstruction_nll")
    ce = -(target * torch.log(belief) + (1 - target) * torch.log1p(-belief))
    return ce.sum(dim=(-2, -1))


def reconstruction_nll_logits(canvas: Tensor, target: Tensor) -> Tensor:
    """Same quantity as :func:`reconstruction_nll` for ``belief = sigmoid(canvas)``."""
    _check_shapes(canvas, target, "reconstruction_nll_logits")
    return _pixel_nll_logits(canvas, target).sum(dim=(-2, -1))


def _pixel_nll_logits(canvas: Tensor, target: Tensor) -> Tensor:
    return F.binary_cross_entropy_with_logits(canvas, target.to(canvas.dtype), reduction="none")


def kl_diag_gaussian(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last axis."""
    _check_shapes(q.mean, p.mean, "kl_diag_gaussian")
    return _kl_per_dim(q, p).sum(dim=-1)


def _kl_per_dim(q: GaussianParams, p: GaussianParams) -> Tensor:
    d = q.log_variance - p.log_variance
    # expm1(d) - d is the variance term; written this way it cannot round
    # below zero when the two variances nearly agree.
    return 0.5 * ((torch.expm1(d) - d) + (q.mean - p.mean) ** 2 * torch.exp(-p.log_variance))


@dataclass
class BoundBreakdown:
    """Per-episode, per-step terms, each shaped ``(B, T)``."""

    nll: Tensor
    kl_c: Tensor
    kl_o: Tensor
    weights: Tensor

    @property
    def weighted_nll(self) -> Tensor:
        return (self.nll * self.weights).sum(-1)

    @property
    def total_kl(self) -> Tensor:
        return (self.kl_c + self.kl_o).sum(-1)


def variational_bound(trace: Trace, targets: Tensor, cw: CostWeights,
                      kl_scale: float = 1.0) -> tuple[Tensor, BoundBreakdown]:
    """Batch-mean of weighted NLL plus ``kl_scale`` times the summed guide/prior KL.

    ``targets`` is ``(B, T, H, W)``.
    """
    _check_bound_inputs(trace, targets, cw)
    nll = torch.stack([reconstruction_nll_logits(s.canvas, targets[:, t])
                       for t, s in enumerate(trace.steps)], dim=1)
    kl_c = torch.stack([kl_diag_gaussian(s.guide_c, s.prior_c) for s in trace.steps], dim=1)
    kl_o = torch.stack([kl_diag_gaussian(s.guide_o, s.prior_o) for s in trace.steps], dim=1)
    parts = BoundBreakdown(nll, kl_c, kl_o, cw.as_tensor(nll.dtype))
    loss = (parts.weighted_nll + kl_scale * parts.total_kl).mean()
    return loss, parts


def bound_terms(trace: Trace, targets: Tensor, cw: CostWeights, kl_scale: float = 1.0) -> Tensor:
    """Every additive contribution to :func:`variational_bound`'s loss, flattened.

    The terms are weighted per-pixel cross-entropies and per-dimension KL
    values, each already divided by the batch size, so ``terms.sum()`` is the
    loss.  Finite-difference checks can difference them term by term, which
    avoids the cancellation error of differencing one large sum.
    """
    _check_bound_inputs(trace, targets, cw)
    B = targets.shape[0]
    w = cw.as_tensor(targets.dtype)
    pieces = []
    for t, s in enumerate(trace.steps):
        pieces.append((w[t] / B * _pixel_nll_logits(s.canvas, targets[:, t])).flatten())
        pieces.append((kl_scale / B * _kl_per_dim(s.guide_c, s.prior_c)).flatten())
        pieces.append((kl_scale / B * _kl_per_dim(s.guide_o, s.prior_o)).flatten())
    return torch.cat(pieces)


def _check_bound_inputs(trace: Trace, targets: Tensor, cw: CostWeights):
    if trace.mode != "guide":
        raise ValueError("variational bound needs a guide-mode trace")
    if len(trace) != len(cw) or targets.shape[1] != len(trace):
        raise ValueError("trace, targets and cost weights disagree on the horizon")
