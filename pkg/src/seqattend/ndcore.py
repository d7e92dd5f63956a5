"""Tensor numerics shared by every module.

Tensors are plain ``torch.Tensor`` values; torch's reverse-mode autograd is
the differentiation mechanism.  What this module adds is the contract around
it: a finite-difference gradient checker that every differentiable operation
is tested against, Gaussian parameter bundles with a clamped log-variance,
and explicit finiteness checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

Tensor = torch.Tensor

LOG_VAR_MIN = -8.0
LOG_VAR_MAX = 4.0


class NumericError(RuntimeError):
    """A non-finite value appeared where a finite one was required."""


def check_finite(x: Tensor, what: str) -> Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"non-finite values in {what}")
    return x


@dataclass
class GaussianParams:
    """Diagonal Gaussian given by mean and (clamped) log-variance."""

    mean: Tensor
    log_variance: Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != "
                f"log_variance shape {tuple(self.log_variance.shape)}")
        self.log_variance = self.log_variance.clamp(LOG_VAR_MIN, LOG_VAR_MAX)

    @classmethod
    def from_stacked(cls, out: Tensor) -> "GaussianParams":
        """Split the last axis of ``out`` into (mean, log_variance) halves."""
        mean, log_var = out.chunk(2, dim=-1)
        return cls(mean, log_var)

    @property
    def std(self) -> Tensor:
        return torch.exp(0.5 * self.log_variance)

    def detach(self) -> "GaussianParams":
        return GaussianParams(self.mean.detach(), self.log_variance.detach())


def gaussian_sample(params: GaussianParams, noise: Tensor) -> Tensor:
    """Reparameterized draw ``mean + std * noise``."""
    if noise.shape != params.mean.shape:
        raise ValueError(
            f"noise shape {tuple(noise.shape)} != mean shape {tuple(params.mean.shape)}")
    return params.mean + params.std * noise


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    max_abs_error: list[float]
    analytic: list[Tensor]
    numeric: list[Tensor]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def _eval_terms(function, inputs, label) -> Tensor:
    with torch.no_grad():
        value = function(*inputs).detach().reshape(-1).to(torch.float64)
    if not bool(torch.isfinite(value).all()):
        raise NumericError(f"non-finite function value while perturbing {label}")
    return value


def grad_check(function: Callable[..., Tensor], inputs: Sequence[Tensor],
               epsilon: float = 1e-5, names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare autograd gradients against central differences.

    The checked objective is ``function(*inputs).sum()``.  A scalar is the
    usual case; a function may instead return its unreduced additive terms,
    which are then differenced term by term and summed with ``math.fsum``.
    Each input is perturbed element by element in place, so inputs must be
    leaf tensors (parameters count).  The relative error of each element is
    ``|a - n| / max(|a|, |n|, 1e-8)``; the report holds the maximum per input.

    Elements whose true gradient is below roughly ``1e-16 * |f| / epsilon``
    drown in cancellation noise and show large relative error even when the
    gradient is right; returning terms shrinks ``|f|`` to the size of the
    largest term, and ``max_abs_error`` is reported to tell the cases apart.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    names = list(names) if names is not None else [f"input[{i}]" for i in range(len(inputs))]
    leaves = [x.detach().requires_grad_(True) if not x.requires_grad else x for x in inputs]

    value = function(*leaves)
    if value.numel() == 0:
        raise ValueError("function returned an empty tensor")
    if not bool(torch.isfinite(value).all()):
        raise NumericError("non-finite function value at the unperturbed point")
    analytic = torch.autograd.grad(value.sum(), leaves, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g.detach() for x, g in zip(leaves, analytic)]

    errors, abs_errors, numerics = [], [], []
    for x, a, name in zip(leaves, analytic, names):
        flat = x.data.view(-1)
        numeric = torch.empty_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + epsilon
            f_plus = _eval_terms(function, leaves, f"{name}[{i}]")
            flat[i] = orig - epsilon
            f_minus = _eval_terms(function, leaves, f"{name}[{i}]")
            flat[i] = orig
            numeric[i] = math.fsum((f_plus - f_minus).tolist()) / (2 * epsilon)
        numeric = numeric.view_as(x)
        denom = torch.maximum(torch.maximum(a.abs(), numeric.abs()),
                              torch.full_like(a, 1e-8))
        diff = (a - numeric).abs()
        errors.append(float((diff / denom).max()) if diff.numel() else 0.0)
        abs_errors.append(float(diff.max()) if diff.numel() else 0.0)
        numerics.append(numeric)
    return GradCheckReport(errors, abs_errors, analytic, numerics)
