"""Controller/observer LSTM pair with stochastic latents and a guide module.

One step, in either mode:

    z_c   ~ prior_c(s_c[t-1])            or guide_c(s_c[t-1], s_g[t-1])
    r     = read(x[t], decode(z_c))
    s_o   = observer(s_o[t-1], r)
    e     = read(y[t] - belief[t-1], decode(z_c))          guide mode only
    s_g   = guide(s_g[t-1], [r, e])                        guide mode only
    z_o   ~ prior_o(s_o)                 or guide_o(s_o, s_g)
    s_c   = controller(s_c[t-1], z_o)
    canvas += write(s_c.h);  belief = sigmoid(canvas)

Both priors are evaluated on every step, so a guide-mode trace carries
everything needed for the KL terms of the variational bound.  Guide heads see
the matching prior-side hidden state next to the guide's own, so a guide head
holding the prior head's weights and zeros on the guide block reproduces the
prior exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .attention import (GlimpseParams, apply_filterbank, decode_glimpse, glimpse_latent_size,
                        multiscale_filterbank, read_glimpse, reading_size)
from .ndcore import GaussianParams, NumericError, Tensor, gaussian_sample


@dataclass
class ModelConfig:
    image_shape: tuple[int, int] = (20, 20)
    scales: tuple[str, ...] = ("1x", "2x")
    grid_side: int = 2
    controller_size: int = 128
    observer_size: int = 64
    guide_size: int = 64
    z_o_size: int = 32
    # starting log-variance of the glimpse-latent heads
    glimpse_init_log_var: float = 0.0
    # also feed the sampled glimpse latent to the observer next to the reading
    observer_sees_glimpse: bool = False

    def __post_init__(self):
        self.image_shape = tuple(self.image_shape)
        self.scales = tuple(self.scales)

    @property
    def z_c_size(self) -> int:
        return glimpse_latent_size(len(self.scales))

    @property
    def reading_size(self) -> int:
        return reading_size(self.scales, self.grid_side)

    @property
    def observer_input_size(self) -> int:
        return self.reading_size + (self.z_c_size if self.observer_sees_glimpse else 0)

    @property
    def n_pixels(self) -> int:
        return self.image_shape[0] * self.image_shape[1]


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, size: int, dtype=None) -> "LstmState":
        return cls(torch.zeros(batch, size, dtype=dtype), torch.zeros(batch, size, dtype=dtype))


def _uniform_fan_in(linear: nn.Linear):
    bound = 1.0 / math.sqrt(linear.in_features)
    nn.init.uniform_(linear.weight, -bound, bound)
    nn.init.uniform_(linear.bias, -bound, bound)


class LstmCell(nn.Module):
    """Standard LSTM; gates ordered (input, forget, output, candidate)."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.gates = nn.Linear(input_size + hidden_size, 4 * hidden_size)
        _uniform_fan_in(self.gates)
        with torch.no_grad():
            self.gates.bias[hidden_size:2 * hidden_size].fill_(1.0)

    def forward(self, x: Tensor, state: LstmState) -> LstmState:
        if x.shape[-1] != self.input_size:
            raise ValueError(f"LSTM input has size {x.shape[-1]}, expected {self.input_size}")
        if state.h.shape[-1] != self.hidden_size:
            raise ValueError(f"LSTM state has size {state.h.shape[-1]}, expected {self.hidden_size}")
        i, f, o, g = self.gates(torch.cat([x, state.h], dim=-1)).chunk(4, dim=-1)
        c = torch.sigmoid(f) * state.c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return LstmState(h, c)


class GaussianHead(nn.Module):
    """Affine map from a hidden vector to diagonal Gaussian parameters."""

    def __init__(self, in_size: int, latent_size: int):
        super().__init__()
        self.in_size = in_size
        self.latent_size = latent_size
        self.linear = nn.Linear(in_size, 2 * latent_size)
        _uniform_fan_in(self.linear)

    def forward(self, h: Tensor) -> GaussianParams:
        if h.shape[-1] != self.in_size:
            raise ValueError(f"head input has size {h.shape[-1]}, expected {self.in_size}")
        return GaussianParams.from_stacked(self.linear(h))


@dataclass
class ModelState:
    s_c: LstmState
    s_o: LstmState
    canvas: Tensor
    s_g: LstmState | None = None

    @property
    def belief(self) -> Tensor:
        return torch.sigmoid(self.canvas)


@dataclass
class StepRecord:
    z_c: Tensor
    z_o: Tensor
    prior_c: GaussianParams
    prior_o: GaussianParams
    reading: Tensor
    canvas: Tensor
    belief: Tensor
    glimpse: GlimpseParams
    guide_c: GaussianParams | None = None
    guide_o: GaussianParams | None = None
    residual_reading: Tensor | None = None


@dataclass
class Trace:
    mode: str
    steps: list[StepRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    @property
    def beliefs(self) -> Tensor:
        """``(B, T, H, W)``"""
        return torch.stack([s.belief for s in self.steps], dim=1)

    @property
    def canvases(self) -> Tensor:
        return torch.stack([s.canvas for s in self.steps], dim=1)

    @property
    def readings(self) -> Tensor:
        return torch.stack([s.reading for s in self.steps], dim=1)


class AttentionModel(nn.Module):
    """All trainable parts: three LSTMs, four Gaussian heads, and the canvas writer."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        self.observer = LstmCell(cfg.observer_input_size, cfg.observer_size)
        self.controller = LstmCell(cfg.z_o_size, cfg.controller_size)
        self.guide = LstmCell(2 * cfg.reading_size, cfg.guide_size)
        self.prior_c_head = GaussianHead(cfg.controller_size, cfg.z_c_size)
        self.prior_o_head = GaussianHead(cfg.observer_size, cfg.z_o_size)
        self.guide_c_head = GaussianHead(cfg.controller_size + cfg.guide_size, cfg.z_c_size)
        self.guide_o_head = GaussianHead(cfg.observer_size + cfg.guide_size, cfg.z_o_size)
        self.writer = nn.Linear(cfg.controller_size, cfg.n_pixels)
        _uniform_fan_in(self.writer)
        with torch.no_grad():
            for head in (self.prior_c_head, self.guide_c_head):
                head.linear.bias[cfg.z_c_size:] = cfg.glimpse_init_log_var

    @property
    def dtype(self):
        return self.writer.weight.dtype

    # individual step operations -------------------------------------------

    def prior_c(self, s_c_prev: LstmState) -> GaussianParams:
        return self.prior_c_head(s_c_prev.h)

    def prior_o(self, s_o: LstmState) -> GaussianParams:
        return self.prior_o_head(s_o.h)

    def guide_c(self, s_c_prev: LstmState, s_g_prev: LstmState) -> GaussianParams:
        return self.guide_c_head(torch.cat([s_c_prev.h, s_g_prev.h], dim=-1))

    def guide_o(self, s_o: LstmState, s_g: LstmState) -> GaussianParams:
        return self.guide_o_head(torch.cat([s_o.h, s_g.h], dim=-1))

    @torch.no_grad()
    def tie_guide_to_prior(self):
        """Make both guide heads exact copies of the prior heads (guide block zeroed)."""
        for guide, prior in ((self.guide_c_head, self.prior_c_head),
                             (self.guide_o_head, self.prior_o_head)):
            n = prior.in_size
            guide.linear.weight.zero_()
            guide.linear.weight[:, :n] = prior.linear.weight
            guide.linear.bias.copy_(prior.linear.bias)
        return self

    def observer_step(self, s_o_prev: LstmState, reading: Tensor,
                      z_c: Tensor | None = None) -> LstmState:
        if self.config.observer_sees_glimpse:
            if z_c is None:
                raise ValueError("this observer also takes the glimpse latent")
            reading = torch.cat([reading, z_c], dim=-1)
        return self.observer(reading, s_o_prev)

    def controller_step(self, s_c_prev: LstmState, z_o: Tensor) -> LstmState:
        return self.controller(z_o, s_c_prev)

    def guide_step(self, s_g_prev: LstmState, reading: Tensor, residual_reading: Tensor) -> LstmState:
        if residual_reading.shape != reading.shape:
            raise ValueError("residual reading must match the primary reading's shape")
        return self.guide(torch.cat([reading, residual_reading], dim=-1), s_g_prev)

    def update_belief(self, canvas_prev: Tensor, s_c: LstmState) -> tuple[Tensor, Tensor]:
        if tuple(canvas_prev.shape[-2:]) != self.config.image_shape:
            raise ValueError(f"canvas shape {tuple(canvas_prev.shape[-2:])} "
                             f"!= image shape {self.config.image_shape}")
        canvas = canvas_prev + self.writer(s_c.h).view(canvas_prev.shape)
        return canvas, torch.sigmoid(canvas)

    def read(self, image: Tensor, glimpse: GlimpseParams) -> Tensor:
        return read_glimpse(image, glimpse, self.config.scales, self.config.grid_side)

    def initial_state(self, batch: int, guide: bool) -> ModelState:
        cfg, dt = self.config, self.dtype
        return ModelState(
            s_c=LstmState.zeros(batch, cfg.controller_size, dt),
            s_o=LstmState.zeros(batch, cfg.observer_size, dt),
            canvas=torch.zeros(batch, *cfg.image_shape, dtype=dt),
            s_g=LstmState.zeros(batch, cfg.guide_size, dt) if guide else None,
        )


def _pair(fb):
    return type(fb)(fb.f_x.unsqueeze(1), fb.f_y.unsqueeze(1))


def _noise(shape, generator, dtype):
    return torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype)


def rollout(model: AttentionModel, inputs: Tensor, targets: Tensor | None = None,
            mode: str = "prior", generator: torch.Generator | None = None) -> Trace:
    """Run the model over ``inputs`` of shape ``(B, T, H, W)``.

    Prior mode never touches ``targets``.  Noise is drawn from ``generator``
    in a fixed order (z_c then z_o each step), so prior and guide rollouts
    seeded identically consume identical noise.
    """
    if mode not in ("prior", "guide"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if inputs.dim() != 4:
        raise ValueError("inputs must have shape (B, T, H, W)")
    cfg = model.config
    if tuple(inputs.shape[-2:]) != cfg.image_shape:
        raise ValueError(f"frames are {tuple(inputs.shape[-2:])}, model expects {cfg.image_shape}")
    guided = mode == "guide"
    if guided:
        if targets is None:
            raise ValueError("guide-mode rollout requires targets")
        if targets.shape != inputs.shape:
            raise ValueError("targets and inputs must share shape")
    B, T = inputs.shape[:2]
    dt = model.dtype
    inputs = inputs.to(dt)
    if guided:
        targets = targets.to(dt)

    state = model.initial_state(B, guide=guided)
    trace = Trace(mode)
    for t in range(T):
        p_c = model.prior_c(state.s_c)
        if guided:
            q_c = model.guide_c(state.s_c, state.s_g)
            z_c = gaussian_sample(q_c, _noise(q_c.mean.shape, generator, dt))
        else:
            q_c = None
            z_c = gaussian_sample(p_c, _noise(p_c.mean.shape, generator, dt))
        glimpse = decode_glimpse(z_c, cfg.image_shape, len(cfg.scales))
        fb = multiscale_filterbank(cfg.image_shape, glimpse, cfg.scales, cfg.grid_side)
        if guided:
            # one filterbank serves the input read and the residual read
            pair = torch.stack([inputs[:, t], targets[:, t] - state.belief], dim=1)
            reading, residual = apply_filterbank(pair, _pair(fb), glimpse.gamma[:, None]).unbind(1)
        else:
            reading = apply_filterbank(inputs[:, t], fb, glimpse.gamma)
        s_o = model.observer_step(state.s_o, reading, z_c)
        p_o = model.prior_o(s_o)
        if guided:
            s_g = model.guide_step(state.s_g, reading, residual)
            q_o = model.guide_o(s_o, s_g)
            z_o = gaussian_sample(q_o, _noise(q_o.mean.shape, generator, dt))
        else:
            residual, s_g, q_o = None, None, None
            z_o = gaussian_sample(p_o, _noise(p_o.mean.shape, generator, dt))
        s_c = model.controller_step(state.s_c, z_o)
        canvas, belief = model.update_belief(state.canvas, s_c)
        if not bool(torch.isfinite(canvas).all()) or not bool(torch.isfinite(s_c.h).all()):
            raise NumericError(f"non-finite model state at step {t}")
        trace.steps.append(StepRecord(
            z_c=z_c, z_o=z_o, prior_c=p_c, prior_o=p_o, reading=reading,
            canvas=canvas, belief=belief, glimpse=glimpse,
            guide_c=q_c, guide_o=q_o, residual_reading=residual))
        state = ModelState(s_c=s_c, s_o=s_o, canvas=canvas, s_g=s_g)
    return trace
