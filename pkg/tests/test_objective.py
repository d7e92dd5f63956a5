import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from conftest import small_model
from seqattend.model import rollout
from seqattend.ndcore import GaussianParams
from seqattend.objective import (bound_terms, kl_diag_gaussian, poisson_weights,
                                 reconstruction_nll, reconstruction_nll_logits, variational_bound)

D = torch.float64


def gp(mean, log_var):
    return GaussianParams(torch.tensor(mean, dtype=D), torch.tensor(log_var, dtype=D))


# --- poisson weights ----------------------------------------------------------

def test_weights_single_mass_point():
    cw = poisson_weights(2.0, 6, 5)
    assert cw.weights == (0, 0, 0, 0, 0, 1.0)


def test_weights_small_case_matches_pmf():
    pmf = stats.poisson.pmf(np.arange(3), 1.0)
    expected = pmf / pmf.sum()
    np.testing.assert_allclose(expected, [0.4, 0.4, 0.2], atol=1e-15)
    np.testing.assert_allclose(poisson_weights(1.0, 3, 0).weights, expected, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 30), st.integers(1, 40), st.data())
def test_weights_normalized_and_masked(rate, horizon, data):
    warmup = data.draw(st.integers(0, horizon - 1))
    w = np.asarray(poisson_weights(rate, horizon, warmup).weights)
    assert (w >= 0).all() and not w[:warmup].any()
    assert abs(w.sum() - 1) < 1e-9


@pytest.mark.parametrize("rate,horizon,warmup", [(4.5, 8, 2), (7.5, 15, 5), (0.3, 10, 3)])
def test_weights_offset_pmf_and_scale_invariance(rate, horizon, warmup):
    pmf = stats.poisson.pmf(np.arange(horizon - warmup), rate)
    for scale in (1.0, 1e-3, 250.0):
        raw = scale * pmf
        np.testing.assert_allclose(poisson_weights(rate, horizon, warmup).weights[warmup:],
                                   raw / raw.sum(), rtol=1e-12)


def test_default_rate():
    assert poisson_weights(None, 15, 5).poisson_rate == pytest.approx(7.5)
    assert poisson_weights(None, 8, 2).poisson_rate == pytest.approx(4.5)


@pytest.mark.parametrize("warmup,horizon", [(3, 3), (5, 2), (-1, 4)])
def test_weights_bad_warmup(warmup, horizon):
    with pytest.raises(ValueError):
        poisson_weights(1.0, horizon, warmup)


def test_weights_bad_rate():
    with pytest.raises(ValueError):
        poisson_weights(0.0, 4, 0)


# --- reconstruction -----------------------------------------------------------

def test_nll_half_belief():
    y = torch.rand(7, 9, dtype=D)
    assert reconstruction_nll(torch.full_like(y, 0.5), y).item() == pytest.approx(63 * math.log(2))


def test_nll_entropy_case():
    half = torch.full((4, 4), 0.5, dtype=D)
    assert reconstruction_nll(half, half).item() == pytest.approx(16 * math.log(2))


def test_nll_vanishes_as_belief_approaches_binary_target():
    y = (torch.rand(5, 5, dtype=D) > 0.5).double()
    values = [reconstruction_nll(y * (1 - 2 * e) + e, y).item() for e in (1e-2, 1e-4, 1e-8)]
    assert values[0] > values[1] > values[2] and values[2] < 1e-6


def test_nll_logits_agree():
    canvas = 3 * torch.randn(2, 6, 6, dtype=D)
    y = torch.rand(2, 6, 6, dtype=D)
    assert torch.allclose(reconstruction_nll_logits(canvas, y),
                          reconstruction_nll(torch.sigmoid(canvas), y), rtol=1e-10)


def test_nll_shape_mismatch():
    with pytest.raises(ValueError):
        reconstruction_nll(torch.full((3, 3), 0.5), torch.zeros(3, 4))


# --- KL -------------------------------------------------------------------------

def kl_by_quadrature(mq, vq, mp, vp):
    q, p = stats.norm(mq, math.sqrt(vq)), stats.norm(mp, math.sqrt(vp))
    f = lambda x: q.pdf(x) * (q.logpdf(x) - p.logpdf(x))
    return integrate.quad(f, mq - 30 * math.sqrt(vq), mq + 30 * math.sqrt(vq), limit=200)[0]


def test_kl_identity():
    p = gp([0.3, -1.0], [0.5, -2.0])
    assert kl_diag_gaussian(p, p).item() == 0.0


def test_kl_unit_shift():
    assert kl_by_quadrature(1, 1, 0, 1) == pytest.approx(0.5, abs=1e-9)
    assert kl_diag_gaussian(gp([1.0], [0.0]), gp([0.0], [0.0])).item() == pytest.approx(0.5)


@pytest.mark.parametrize("mq,lq,mp,lp", [(0.5, -1.0, -0.3, 0.7), (2.0, 1.0, 0.0, -0.5)])
def test_kl_matches_quadrature(mq, lq, mp, lp):
    expected = kl_by_quadrature(mq, math.exp(lq), mp, math.exp(lp))
    assert kl_diag_gaussian(gp([mq], [lq]), gp([mp], [lp])).item() == pytest.approx(expected, rel=1e-7)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-5, 5)] * 4), min_size=1, max_size=8))
def test_kl_non_negative(rows):
    mq, lq, mp, lp = (list(c) for c in zip(*rows))
    assert kl_diag_gaussian(gp(mq, lq), gp(mp, lp)).item() >= 0


def test_kl_shape_mismatch():
    with pytest.raises(ValueError):
        kl_diag_gaussian(gp([0.0], [0.0]), gp([0.0, 1.0], [0.0, 0.0]))


# --- bound ----------------------------------------------------------------------

def instance(seed=0, T=4, tie=False):
    m = small_model(seed=seed)
    if tie:
        m.tie_guide_to_prior()
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(2, T, 12, 12, generator=gen, dtype=D)
    y = torch.rand(2, T, 12, 12, generator=gen, dtype=D)
    return m, x, y, poisson_weights(None, T, 1)


def test_bound_with_tied_guide_is_weighted_nll():
    m, x, y, cw = instance(tie=True)
    trace = rollout(m, x, y, "guide", torch.Generator().manual_seed(1))
    loss, parts = variational_bound(trace, y, cw, kl_scale=1.0)
    assert not parts.kl_c.any() and not parts.kl_o.any()
    assert loss.item() == parts.weighted_nll.mean().item()


def test_bound_without_kl_scale():
    m, x, y, cw = instance()
    trace = rollout(m, x, y, "guide", torch.Generator().manual_seed(1))
    loss, parts = variational_bound(trace, y, cw, kl_scale=0.0)
    assert loss.item() == pytest.approx(parts.weighted_nll.mean().item(), rel=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_bound_finite_non_negative_and_exceeds_nll(seed):
    m, x, y, cw = instance(seed)
    trace = rollout(m, x, y, "guide", torch.Generator().manual_seed(seed))
    loss, parts = variational_bound(trace, y, cw, kl_scale=0.7)
    assert math.isfinite(loss.item()) and loss.item() >= 0
    assert bool((parts.kl_c >= 0).all()) and bool((parts.kl_o >= 0).all())
    gap = loss - parts.weighted_nll.mean()
    assert gap.item() == pytest.approx(0.7 * parts.total_kl.mean().item(), rel=1e-12)


def test_bound_needs_guide_trace():
    m, x, y, cw = instance()
    with pytest.raises(ValueError):
        variational_bound(rollout(m, x, None, "prior"), y, cw)


def test_warmup_targets_do_not_change_loss():
    m, x, y, _ = instance(T=5)
    cw = poisson_weights(None, 5, 2)
    trace = rollout(m, x, y, "guide", torch.Generator().manual_seed(2))
    perturbed = y.clone()
    perturbed[:, :2] = torch.rand_like(perturbed[:, :2])
    a = variational_bound(trace, y, cw, 1.0)[0]
    b = variational_bound(trace, perturbed, cw, 1.0)[0]
    assert a.item() == b.item()


@pytest.mark.parametrize("beta", [0.0, 0.3, 1.0])
def test_bound_terms_sum_to_loss(beta):
    m, x, y, cw = instance(seed=3)
    trace = rollout(m, x, y, "guide", torch.Generator().manual_seed(3))
    loss = variational_bound(trace, y, cw, beta)[0]
    terms = bound_terms(trace, y, cw, beta)
    assert terms.dim() == 1 and terms.numel() == 4 * (2 * 144 + 2 * 6 + 2 * 3)
    assert math.fsum(terms.tolist()) == pytest.approx(loss.item(), rel=1e-13)
