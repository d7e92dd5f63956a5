import pytest
import torch

from conftest import small_model
from seqattend.model import LstmCell, LstmState, rollout
from seqattend.ndcore import NumericError, grad_check

D = torch.float64


def zero_params(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def state(batch, size, gen=None):
    if gen is None:
        return LstmState.zeros(batch, size, D)
    return LstmState(torch.randn(batch, size, generator=gen, dtype=D).tanh(),
                     torch.randn(batch, size, generator=gen, dtype=D))


def episode(model, B=2, T=4, seed=0):
    gen = torch.Generator().manual_seed(seed)
    H, W = model.config.image_shape
    return (torch.rand(B, T, H, W, generator=gen, dtype=D),
            torch.rand(B, T, H, W, generator=gen, dtype=D))


def jacobian_norm(f, x, eps=1e-6):
    cols = []
    for i in range(x.shape[-1]):
        d = torch.zeros_like(x)
        d[..., i] = eps
        cols.append((f(x + d) - f(x - d)) / (2 * eps))
    return torch.stack(cols).norm().item()


# --- heads ------------------------------------------------------------------

@pytest.mark.parametrize("head,size_attr,latent", [
    ("prior_c_head", "controller_size", "z_c_size"),
    ("prior_o_head", "observer_size", "z_o_size"),
])
def test_prior_heads_zero_map(tiny_model, head, size_attr, latent):
    m = tiny_model
    zero_params(getattr(m, head))
    n = getattr(m.config, size_attr)
    s = state(3, n)
    p = m.prior_c(s) if head == "prior_c_head" else m.prior_o(s)
    k = getattr(m.config, latent)
    assert p.mean.shape == (3, k) and p.log_variance.shape == (3, k)
    assert torch.equal(p.mean, torch.zeros(3, k, dtype=D))
    assert torch.equal(p.log_variance, torch.zeros(3, k, dtype=D))


def test_prior_c_depends_on_state(tiny_model):
    m = tiny_model
    h = torch.randn(1, m.config.controller_size, dtype=D)
    f = lambda h: m.prior_c(LstmState(h, torch.zeros_like(h))).mean
    assert jacobian_norm(f, h) > 0


def test_prior_o_depends_on_state(tiny_model):
    m = tiny_model
    h = torch.randn(1, m.config.observer_size, dtype=D)
    f = lambda h: m.prior_o(LstmState(h, torch.zeros_like(h))).mean
    assert jacobian_norm(f, h) > 0


def test_guide_heads_shapes_and_zero_map(tiny_model):
    m = tiny_model
    cfg = m.config
    zero_params(m.guide_c_head)
    zero_params(m.guide_o_head)
    qc = m.guide_c(state(2, cfg.controller_size), state(2, cfg.guide_size))
    qo = m.guide_o(state(2, cfg.observer_size), state(2, cfg.guide_size))
    assert qc.mean.shape == (2, cfg.z_c_size) and qo.mean.shape == (2, cfg.z_o_size)
    assert not qc.mean.any() and not qo.log_variance.any()


def test_guide_heads_depend_on_guide_state(tiny_model):
    m = tiny_model
    cfg = m.config
    s_c = state(1, cfg.controller_size, torch.Generator().manual_seed(1))
    h = torch.randn(1, cfg.guide_size, dtype=D)
    f = lambda h: m.guide_c(s_c, LstmState(h, torch.zeros_like(h))).mean
    assert jacobian_norm(f, h) > 0


def test_head_dimension_mismatch(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.prior_c(state(1, tiny_model.config.controller_size + 1))


# --- LSTM steps -------------------------------------------------------------

def test_lstm_zero_parameters_give_zero_hidden(tiny_model):
    m = tiny_model
    zero_params(m.observer)
    r = torch.rand(4, m.config.reading_size, dtype=D)
    s = m.observer_step(state(4, m.config.observer_size), r)
    assert torch.equal(s.h, torch.zeros_like(s.h))


def test_forget_bias_initialised_to_one():
    cell = LstmCell(3, 5)
    assert torch.equal(cell.gates.bias[5:10], torch.ones(5))


@pytest.mark.parametrize("which", ["observer", "controller", "guide"])
def test_lstm_hidden_bounded(tiny_model, which):
    m, cfg = tiny_model, tiny_model.config
    gen = torch.Generator().manual_seed(2)
    with torch.no_grad():
        for p in getattr(m, which).parameters():
            p.mul_(50)
    if which == "observer":
        s = m.observer_step(state(8, cfg.observer_size, gen),
                            10 * torch.randn(8, cfg.reading_size, generator=gen, dtype=D))
    elif which == "controller":
        s = m.controller_step(state(8, cfg.controller_size, gen),
                              10 * torch.randn(8, cfg.z_o_size, generator=gen, dtype=D))
    else:
        r = 10 * torch.randn(8, cfg.reading_size, generator=gen, dtype=D)
        s = m.guide_step(state(8, cfg.guide_size, gen), r, r)
    assert bool((s.h.abs() <= 1).all())


def test_lstm_input_size_checked(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.observer_step(state(1, tiny_model.config.observer_size),
                                 torch.zeros(1, tiny_model.config.reading_size + 1, dtype=D))
    with pytest.raises(ValueError):
        tiny_model.controller_step(state(1, tiny_model.config.controller_size),
                                   torch.zeros(1, 1, dtype=D))


@pytest.mark.parametrize("which", ["observer", "controller", "guide"])
def test_lstm_step_gradients(tiny_model, which):
    m, cfg = tiny_model, tiny_model.config
    gen = torch.Generator().manual_seed(4)
    in_size = {"observer": cfg.reading_size, "controller": cfg.z_o_size,
               "guide": 2 * cfg.reading_size}[which]
    hidden = getattr(m, which).hidden_size
    cell = getattr(m, which)
    for _ in range(10):
        x = torch.randn(2, in_size, generator=gen, dtype=D)
        h0 = torch.randn(2, hidden, generator=gen, dtype=D).tanh()
        c0 = torch.randn(2, hidden, generator=gen, dtype=D)
        w = torch.randn(2, hidden, generator=gen, dtype=D)

        def f(x, h0, c0, weight, bias):
            s = cell(x, LstmState(h0, c0))
            return (w * s.h).sum() + (w * s.c).sum()

        rep = grad_check(f, [x, h0, c0, cell.gates.weight, cell.gates.bias])
        assert rep.worst < 1e-4, rep.max_rel_error


# --- guide step and belief ----------------------------------------------------

def test_guide_step_with_zero_residual(tiny_model):
    m, cfg = tiny_model, tiny_model.config
    y = torch.rand(1, *cfg.image_shape, dtype=D)
    from seqattend.attention import decode_glimpse
    g = decode_glimpse(torch.zeros(1, cfg.z_c_size, dtype=D), cfg.image_shape, len(cfg.scales))
    r = m.read(torch.rand(1, *cfg.image_shape, dtype=D), g)
    e = m.read(y - y, g)
    assert e.shape == r.shape and not e.any()
    s0 = state(1, cfg.guide_size)
    assert torch.equal(m.guide_step(s0, r, e).h, m.guide(torch.cat([r, torch.zeros_like(r)], -1), s0).h)


def test_guide_step_shape_mismatch(tiny_model):
    cfg = tiny_model.config
    r = torch.zeros(1, cfg.reading_size, dtype=D)
    with pytest.raises(ValueError):
        tiny_model.guide_step(state(1, cfg.guide_size), r, r[:, :-1])


def test_update_belief_zero_write(tiny_model):
    m, cfg = tiny_model, tiny_model.config
    zero_params(m.writer)
    canvas = torch.randn(2, *cfg.image_shape, dtype=D)
    s = state(2, cfg.controller_size, torch.Generator().manual_seed(0))
    new, belief = m.update_belief(canvas, s)
    assert torch.equal(new, canvas) and torch.equal(belief, torch.sigmoid(canvas))
    _, half = m.update_belief(torch.zeros_like(canvas), s)
    assert torch.equal(half, torch.full_like(half, 0.5))


def test_update_belief_writes_commute(tiny_model):
    m, cfg = tiny_model, tiny_model.config
    gen = torch.Generator().manual_seed(7)
    a, b = state(1, cfg.controller_size, gen), state(1, cfg.controller_size, gen)
    c0 = torch.zeros(1, *cfg.image_shape, dtype=D)
    ab, _ = m.update_belief(m.update_belief(c0, a)[0], b)
    ba, _ = m.update_belief(m.update_belief(c0, b)[0], a)
    assert torch.allclose(ab, ba, atol=1e-14)


def test_update_belief_shape_checked(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.update_belief(torch.zeros(1, 3, 3, dtype=D),
                                 state(1, tiny_model.config.controller_size))


def test_update_belief_gradients(tiny_model):
    m, cfg = tiny_model, tiny_model.config
    gen = torch.Generator().manual_seed(8)
    canvas = torch.randn(1, *cfg.image_shape, generator=gen, dtype=D)
    # |h| and y bounded away from zero keep every weight gradient resolvable
    sign = torch.randint(0, 2, (1, cfg.controller_size), generator=gen).double() * 2 - 1
    h = sign * (0.3 + 0.7 * torch.rand(1, cfg.controller_size, generator=gen, dtype=D))
    y = 0.2 + 0.8 * torch.rand(1, *cfg.image_shape, generator=gen, dtype=D)

    def f(canvas, h, weight, bias):
        _, belief = m.update_belief(canvas, LstmState(h, h))
        return (belief * y).sum()

    rep = grad_check(f, [canvas, h, m.writer.weight, m.writer.bias])
    assert rep.worst < 1e-4, rep.max_rel_error


# --- rollouts -----------------------------------------------------------------

@pytest.mark.parametrize("mode", ["prior", "guide"])
def test_rollout_length(tiny_model, mode):
    x, y = episode(tiny_model, T=5)
    trace = rollout(tiny_model, x, y, mode, torch.Generator().manual_seed(0))
    assert len(trace) == 5 and trace.beliefs.shape == (2, 5, 12, 12)
    for step in trace.steps:
        assert (step.guide_c is None) == (mode == "prior")
        assert (step.guide_o is None) == (mode == "prior")
        assert step.prior_c is not None and step.prior_o is not None


def test_prior_rollout_ignores_targets(tiny_model):
    x, y = episode(tiny_model)
    poisoned = torch.full_like(y, float("nan"))
    a = rollout(tiny_model, x, y, "prior", torch.Generator().manual_seed(3))
    b = rollout(tiny_model, x, poisoned, "prior", torch.Generator().manual_seed(3))
    c = rollout(tiny_model, x, None, "prior", torch.Generator().manual_seed(3))
    assert torch.equal(a.beliefs, b.beliefs) and torch.equal(a.beliefs, c.beliefs)


@pytest.mark.parametrize("scales,length", [(("1x",), 4), (("1x", "2x"), 8)])
def test_one_reading_per_step(scales, length):
    m = small_model(scales=scales)
    x, _ = episode(m)
    trace = rollout(m, x, None, "prior", torch.Generator().manual_seed(0))
    assert trace.readings.shape == (2, 4, length)


def test_guide_mode_requires_targets(tiny_model):
    x, _ = episode(tiny_model)
    with pytest.raises(ValueError):
        rollout(tiny_model, x, None, "guide")


def test_rollout_rejects_wrong_frames(tiny_model):
    with pytest.raises(ValueError):
        rollout(tiny_model, torch.zeros(1, 2, 5, 5, dtype=D))


def test_rollout_non_finite_state_names_step(tiny_model):
    x, _ = episode(tiny_model)
    with torch.no_grad():
        tiny_model.writer.bias.fill_(float("inf"))
    with pytest.raises(NumericError, match="step 0"):
        rollout(tiny_model, x)


@pytest.mark.parametrize("mode", ["prior", "guide"])
def test_rollout_seed_deterministic(tiny_model, mode):
    x, y = episode(tiny_model)
    a = rollout(tiny_model, x, y, mode, torch.Generator().manual_seed(11))
    b = rollout(tiny_model, x, y, mode, torch.Generator().manual_seed(11))
    for sa, sb in zip(a.steps, b.steps):
        assert torch.equal(sa.z_c, sb.z_c) and torch.equal(sa.z_o, sb.z_o)
        assert torch.equal(sa.belief, sb.belief) and torch.equal(sa.reading, sb.reading)


def test_tied_guide_reproduces_prior_rollout(tiny_model):
    m = tiny_model.tie_guide_to_prior()
    x, y = episode(m)
    prior = rollout(m, x, y, "prior", torch.Generator().manual_seed(5))
    guide = rollout(m, x, y, "guide", torch.Generator().manual_seed(5))
    for sp, sg in zip(prior.steps, guide.steps):
        assert torch.equal(sp.z_c, sg.z_c) and torch.equal(sp.z_o, sg.z_o)
        assert torch.equal(sp.belief, sg.belief)
