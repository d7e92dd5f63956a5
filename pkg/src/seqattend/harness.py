"""Training, evaluation, checkpoints and trace rendering."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .attention import footprint
from .data import Episode, FormatError, write_pgm
from .model import AttentionModel, ModelConfig, Trace, rollout
from .ndcore import NumericError
from .objective import reconstruction_nll, variational_bound
from .tasks import EVAL, TRAIN, make_source

log = logging.getLogger(__name__)

METRICS_HEADER = ("update", "weighted_nll", "total_kl", "bound")
TIMING_HEADER = ("update", "wall_time")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    task: str = "track-1"
    data_path: str | None = None
    controller_size: int = 128
    observer_size: int = 64
    guide_size: int = 64
    z_o_size: int = 32
    glimpse_init_log_var: float = 0.0
    observer_sees_glimpse: bool = False
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 10.0
    batch_size: int = 32
    total_updates: int = 2000
    kl_anneal_fraction: float = 0.2
    seed: int = 0
    out_dir: str = "runs/default"
    log_every: int = 10
    checkpoint_every: int = 500
    dtype: str = "float32"
    task_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("controller_size", "observer_size", "guide_size", "z_o_size",
                     "batch_size", "log_every", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.total_updates < 0:
            raise ConfigError("total_updates must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if not 0 <= self.kl_anneal_fraction <= 1:
            raise ConfigError("kl_anneal_fraction must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def source(self):
        try:
            return make_source(self.task, self.data_path, **self.task_overrides)
        except TypeError as exc:
            raise ConfigError(f"bad task_overrides: {exc}") from exc

    def model_config(self, source) -> ModelConfig:
        return ModelConfig(image_shape=source.image_shape, scales=source.scales,
                           controller_size=self.controller_size,
                           observer_size=self.observer_size, guide_size=self.guide_size,
                           z_o_size=self.z_o_size,
                           glimpse_init_log_var=self.glimpse_init_log_var,
                           observer_sees_glimpse=self.observer_sees_glimpse)


def build_model(config: TrainConfig, source=None) -> AttentionModel:
    source = source or config.source()
    torch.manual_seed(config.seed)
    return AttentionModel(config.model_config(source)).to(config.torch_dtype)


# --- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"GLCK"
CKPT_VERSION = 1
_DTYPES = {torch.float32: (b"f", "<f4"), torch.float64: (b"d", "<f8")}
_CODES = {b"f": (torch.float32, "<f4"), b"d": (torch.float64, "<f8")}


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, torch.Tensor]
    update: int = 0
    rng_state: bytes = b""

    def to_bytes(self) -> bytes:
        out = io.BytesIO()

        def blob(b: bytes):
            out.write(struct.pack("<I", len(b)))
            out.write(b)

        out.write(CKPT_MAGIC)
        out.write(struct.pack("<I", CKPT_VERSION))
        # out_dir names where a run was written, not how it was configured;
        # leaving it out lets identical runs in different places match byte for byte
        snapshot = dataclasses.replace(self.config, out_dir="")
        blob(snapshot.to_json().encode("utf-8"))
        out.write(struct.pack("<Q", self.update))
        blob(self.rng_state)
        out.write(struct.pack("<I", len(self.params)))
        for name, value in self.params.items():
            code, np_dtype = _DTYPES[value.dtype]
            blob(name.encode("utf-8"))
            out.write(code)
            out.write(struct.pack("<I", value.dim()))
            out.write(struct.pack(f"<{value.dim()}I", *value.shape))
            out.write(value.detach().cpu().numpy().astype(np_dtype).tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        view = memoryview(raw)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise FormatError(f"checkpoint truncated at offset {pos}")
            chunk = bytes(view[pos:pos + n])
            pos += n
            return chunk

        def u32():
            return struct.unpack("<I", take(4))[0]

        if take(4) != CKPT_MAGIC:
            raise FormatError("not a checkpoint (bad magic at offset 0)")
        if (version := u32()) != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        config = TrainConfig.from_dict(json.loads(take(u32()).decode("utf-8")))
        update = struct.unpack("<Q", take(8))[0]
        rng_state = take(u32())
        params = {}
        for _ in range(u32()):
            name = take(u32()).decode("utf-8")
            dtype, np_dtype = _CODES[take(1)]
            ndim = u32()
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            n = math.prod(shape)
            values = np.frombuffer(take(n * np.dtype(np_dtype).itemsize), dtype=np_dtype)
            params[name] = torch.from_numpy(values.reshape(shape).copy()).to(dtype)
        return cls(config, params, update, rng_state)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def model(self) -> AttentionModel:
        model = build_model(self.config)
        try:
            model.load_state_dict(self.params)
        except RuntimeError as exc:
            raise ConfigError(f"checkpoint parameters do not fit the model: {exc}") from exc
        return model


def make_checkpoint(config, model, update, generator) -> Checkpoint:
    params = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(config, params, update, bytes(generator.get_state().numpy().tobytes()))


# --- training ---------------------------------------------------------------

def kl_scale_at(update: int, total: int, anneal_fraction: float) -> float:
    span = anneal_fraction * total
    return 1.0 if span <= 0 else min(1.0, update / span)


def clip_global_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(g.pow(2).sum()) for g in grads))
    if norm > max_norm:
        for g in grads:
            g.mul_(max_norm / norm)
    return norm


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics_path: Path
    rows: list[tuple]


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def train(config: TrainConfig, progress=None) -> TrainResult:
    """Fit the model with the guide as proposal; writes metrics and checkpoints to ``out_dir``."""
    torch.use_deterministic_algorithms(True)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = config.source()
    weights = source.weights
    model = build_model(config, source)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr,
                           betas=(config.beta1, config.beta2), eps=config.adam_eps)
    gen = torch.Generator().manual_seed(config.seed)
    dt = config.torch_dtype

    (out / "config.json").write_text(config.to_json() + "\n")
    metrics_path, timing_path = out / "metrics.csv", out / "timing.csv"
    rows = []
    last_good = make_checkpoint(config, model, 0, gen)
    start = time.perf_counter()
    with open(metrics_path, "w", newline="") as mf, open(timing_path, "w", newline="") as tf:
        metrics, timing = csv.writer(mf), csv.writer(tf)
        metrics.writerow(METRICS_HEADER)
        timing.writerow(TIMING_HEADER)
        for u in range(config.total_updates):
            inputs, targets = source.batch(config.seed, TRAIN, u * config.batch_size,
                                           config.batch_size)
            inputs, targets = torch.from_numpy(inputs).to(dt), torch.from_numpy(targets).to(dt)
            beta = kl_scale_at(u, config.total_updates, config.kl_anneal_fraction)
            try:
                trace = rollout(model, inputs, targets, "guide", gen)
                loss, parts = variational_bound(trace, targets, weights, beta)
            except NumericError as exc:
                _abort(out, last_good, f"update {u}: {exc}")
            if not math.isfinite(loss.item()):
                _abort(out, last_good, f"update {u}: non-finite loss {loss.item()}")
            opt.zero_grad()
            loss.backward()
            clip_global_norm(model.parameters(), config.clip_norm)
            opt.step()
            if u % config.log_every == 0 or u == config.total_updates - 1:
                nll = parts.weighted_nll.detach().mean().item()
                kl = parts.total_kl.detach().mean().item()
                row = (u, nll, kl, nll + kl)
                rows.append(row)
                metrics.writerow([_fmt(v) for v in row])
                timing.writerow([u, f"{time.perf_counter() - start:.3f}"])
                mf.flush()
                tf.flush()
                if progress:
                    progress(row)
            last_good = make_checkpoint(config, model, u + 1, gen)
            if (u + 1) % config.checkpoint_every == 0:
                last_good.save(out / f"checkpoint_{u + 1:06d}.glck")
    final = make_checkpoint(config, model, config.total_updates, gen)
    final.save(out / "checkpoint.glck")
    return TrainResult(final, metrics_path, rows)


def _abort(out: Path, last_good: Checkpoint, message: str):
    path = out / "last_good.glck"
    last_good.save(path)
    log.error("training aborted: %s (last good checkpoint: %s)", message, path)
    raise NumericError(f"{message}; last good checkpoint saved to {path}")


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "update" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(f)]


# --- evaluation -------------------------------------------------------------

@dataclass
class EvalReport:
    task: str
    n_episodes: int
    seed: int
    weights: list[float]
    mse_per_step: list[float]
    nll_per_step: list[float]
    weighted_mse: float
    weighted_nll: float
    half_mse_per_step: list[float]
    half_weighted_mse: float
    half_weighted_nll: float
    mean_frame_weighted_mse: float
    mean_frame_weighted_nll: float

    def to_dict(self):
        return asdict(self)


def checkpoint_source(checkpoint: Checkpoint, task: str | None = None, data_path: str | None = None):
    """Episode source for ``task`` (default: the training task) checked against the checkpoint.

    The training task keeps its ``task_overrides``; another task gets its defaults.
    """
    cfg = checkpoint.config
    task = task or cfg.task
    try:
        src = make_source(task, data_path or cfg.data_path,
                          **(cfg.task_overrides if task == cfg.task else {}))
    except TypeError as exc:
        raise ConfigError(f"bad task_overrides: {exc}") from exc
    trained_on = cfg.source() if task != cfg.task else src
    if (tuple(src.image_shape), tuple(src.scales)) != (tuple(trained_on.image_shape),
                                                       tuple(trained_on.scales)):
        raise ConfigError(f"task {task!r} frames {src.image_shape} with scales {src.scales} "
                          f"do not match the checkpoint")
    return src


def _weighted(per_step, w):
    return float(np.dot(per_step, w))


@torch.no_grad()
def evaluate(checkpoint: Checkpoint, task: str | None = None, n_episodes: int = 256,
             seed: int = 0, data_path: str | None = None, batch_size: int = 128) -> EvalReport:
    """Prior-mode rollouts on held-out episodes, scored against their targets.

    Baselines: a constant 0.5 belief, and the mean target frame of the
    training distribution.
    """
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    cfg = checkpoint.config
    task = task or cfg.task
    src = checkpoint_source(checkpoint, task, data_path)
    model = checkpoint.model()
    w = np.asarray(src.weights.weights)
    gen = torch.Generator().manual_seed(seed)
    mean_frame = torch.from_numpy(np.clip(src.mean_target(cfg.seed), 1e-6, 1 - 1e-6)).double()

    sq, nll, sq_half, sq_mean, nll_mean = [], [], [], [], []
    for start in range(0, n_episodes, batch_size):
        n = min(batch_size, n_episodes - start)
        inputs, targets = src.batch(seed, EVAL, start, n)
        inputs, targets = torch.from_numpy(inputs), torch.from_numpy(targets).double()
        beliefs = rollout(model, inputs, None, "prior", gen).beliefs.double()
        sq.append(((beliefs - targets) ** 2).mean(dim=(-2, -1)))
        nll.append(reconstruction_nll(beliefs.clamp(1e-7, 1 - 1e-7), targets))
        sq_half.append(((0.5 - targets) ** 2).mean(dim=(-2, -1)))
        sq_mean.append(((mean_frame - targets) ** 2).mean(dim=(-2, -1)))
        nll_mean.append(reconstruction_nll(mean_frame.expand_as(targets), targets))

    def per_step(chunks):
        return torch.cat(chunks).mean(0).numpy()

    mse, nl, half = per_step(sq), per_step(nll), per_step(sq_half)
    n_pix = math.prod(src.image_shape)
    return EvalReport(
        task=task, n_episodes=n_episodes, seed=seed, weights=w.tolist(),
        mse_per_step=mse.tolist(), nll_per_step=nl.tolist(),
        weighted_mse=_weighted(mse, w), weighted_nll=_weighted(nl, w),
        half_mse_per_step=half.tolist(), half_weighted_mse=_weighted(half, w),
        half_weighted_nll=n_pix * math.log(2),
        mean_frame_weighted_mse=_weighted(per_step(sq_mean), w),
        mean_frame_weighted_nll=_weighted(per_step(nll_mean), w),
    )


# --- rendering --------------------------------------------------------------

GAP_VALUE = 0.5


def trace_strip(trace: Trace, episode: Episode, index: int = 0) -> np.ndarray:
    """Three rows (inputs, beliefs, 1x attention footprints) separated by 1-pixel gaps."""
    T = len(trace)
    if episode.inputs.shape[0] != T:
        raise ValueError(f"trace has {T} steps but episode has {episode.inputs.shape[0]}")
    H, W = episode.inputs.shape[1:]
    strip = np.full((3 * H + 2, T * W + T - 1), GAP_VALUE)
    for t, step in enumerate(trace.steps):
        g = step.glimpse
        one = type(g)(*(v[index:index + 1] for v in
                        (g.center_x, g.center_y, g.delta, g.sigma, g.gamma)))
        tiles = (episode.inputs[t],
                 step.belief[index].detach().double().numpy(),
                 footprint((H, W), one)[0].detach().double().numpy())
        c0 = t * (W + 1)
        for row, tile in enumerate(tiles):
            r0 = row * (H + 1)
            strip[r0:r0 + H, c0:c0 + W] = tile
    return strip


def render_trace(trace: Trace, episode: Episode, path, index: int = 0,
                 comment: str | None = None) -> np.ndarray:
    strip = trace_strip(trace, episode, index)
    write_pgm(path, strip, comment)
    return strip
