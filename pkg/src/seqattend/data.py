"""Synthetic tracking videos, hurried-copy episodes and image ingestion.

All generators take a ``numpy.random.Generator``; identical streams give
identical episodes.  Rows are the first coordinate everywhere.
"""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .objective import CostWeights, poisson_weights


class FormatError(ValueError):
    pass


@dataclass
class ObjectSpec:
    shape: str = "cross"
    half_extent: int = 2
    intensity: float = 1.0
    is_target: bool = True

    def __post_init__(self):
        if self.shape not in ("cross", "circle"):
            raise ValueError(f"unknown object shape {self.shape!r}")
        if self.half_extent < 1:
            raise ValueError("half_extent must be >= 1")
        if not 0 < self.intensity <= 1:
            raise ValueError("intensity must be in (0, 1]")


@dataclass
class TaskSpec:
    extents: tuple[int, int] = (20, 20)
    horizon: int = 15
    objects: list[ObjectSpec] = field(default_factory=lambda: [ObjectSpec()])
    max_speed: float = 1.5
    reset_prob: float = 0.05
    noise_prob: float = 0.05
    warmup: int = 5
    poisson_rate: float | None = None

    def __post_init__(self):
        self.extents = tuple(self.extents)
        self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]
        if not (0 <= self.reset_prob <= 1 and 0 <= self.noise_prob <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.max_speed <= 0:
            raise ValueError("max_speed must be positive")
        if not 0 <= self.warmup < self.horizon:
            raise ValueError("need 0 <= warmup < horizon")

    def cost_weights(self) -> CostWeights:
        return poisson_weights(self.poisson_rate, self.horizon, self.warmup)


@dataclass
class Episode:
    inputs: np.ndarray   # (T, H, W) float32 in [0, 1]
    targets: np.ndarray  # (T, H, W)
    weights: CostWeights


def reflect(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    """Fold ``pos`` back into ``[lo, hi]``, flipping ``vel`` at every wall hit."""
    if hi <= lo:
        return lo, vel
    while pos < lo or pos > hi:
        if pos > hi:
            pos, vel = 2 * hi - pos, -vel
        else:
            pos, vel = 2 * lo - pos, -vel
    return pos, vel


def _interior(extents, half_extent):
    H, W = extents
    lo = float(half_extent)
    hi_r, hi_c = H - 1 - half_extent, W - 1 - half_extent
    if hi_r < lo or hi_c < lo:
        raise ValueError(f"object of half-extent {half_extent} does not fit in {extents}")
    return lo, float(hi_r), float(hi_c)


def _disc_velocity(rng, max_speed):
    r = max_speed * math.sqrt(rng.random())
    a = 2 * math.pi * rng.random()
    return r * math.sin(a), r * math.cos(a)


def sample_trajectory(rng: np.random.Generator, horizon: int, extents, max_speed: float,
                      reset_prob: float, half_extent: int = 0, return_resets: bool = False,
                      initial_velocity=None):
    """``(horizon, 2)`` continuous (row, col) positions of a bouncing object.

    The start is uniform over positions that keep the whole object in frame.
    Before each move after the first frame the velocity is redrawn from the
    disc of radius ``max_speed`` with probability ``reset_prob``.  With
    ``return_resets`` the boolean reset flags (one per frame, first False) are
    returned as well.
    """
    if max_speed <= 0:
        raise ValueError("max_speed must be positive")
    lo, hi_r, hi_c = _interior(extents, half_extent)
    r = lo + (hi_r - lo) * rng.random()
    c = lo + (hi_c - lo) * rng.random()
    vr, vc = _disc_velocity(rng, max_speed) if initial_velocity is None else initial_velocity
    positions = np.empty((horizon, 2))
    resets = np.zeros(horizon, dtype=bool)
    positions[0] = r, c
    for t in range(1, horizon):
        if rng.random() < reset_prob:
            vr, vc = _disc_velocity(rng, max_speed)
            resets[t] = True
        r, vr = reflect(r + vr, vr, lo, hi_r)
        c, vc = reflect(c + vc, vc, lo, hi_c)
        positions[t] = r, c
    return (positions, resets) if return_resets else positions


def object_template(obj: ObjectSpec) -> np.ndarray:
    """Boolean ``(2e+1, 2e+1)`` sprite for an object of half-extent ``e``."""
    return _template(obj.shape, obj.half_extent).copy()


@lru_cache(maxsize=None)
def _template(shape: str, e: int) -> np.ndarray:
    d = np.arange(-e, e + 1)
    dr, dc = d[:, None], d[None, :]
    if shape == "cross":
        return (dr == 0) | (dc == 0)
    return dr ** 2 + dc ** 2 <= e ** 2


def _stamp(padded: np.ndarray, obj: ObjectSpec, position, pad: int):
    """Add ``obj`` into a frame padded by ``pad`` pixels on every side."""
    e = obj.half_extent
    r0, c0 = (int(round(v)) + pad for v in position)
    H, W = padded.shape
    if e <= r0 < H - e and e <= c0 < W - e:
        padded[r0 - e:r0 + e + 1, c0 - e:c0 + e + 1] += obj.intensity * _template(obj.shape, e)


def _rasterize(placed, extents) -> np.ndarray:
    pad = max((obj.half_extent for obj, _ in placed), default=0)
    H, W = extents
    padded = np.zeros((H + 2 * pad, W + 2 * pad))
    for obj, pos in placed:
        _stamp(padded, obj, pos, pad)
    return padded[pad:pad + H, pad:pad + W]


def object_mask(obj: ObjectSpec, position, extents) -> np.ndarray:
    """Full-frame boolean mask of ``obj`` centered at the rounded ``position``."""
    return _rasterize([(ObjectSpec(obj.shape, obj.half_extent), position)], extents) > 0


def add_noise(frames: np.ndarray, noise_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Add a uniform [0, 1] draw to each pixel with probability ``noise_prob``."""
    hit = rng.random(frames.shape) < noise_prob
    return frames + hit * rng.random(frames.shape)


def render_frame(placed, extents, noise_prob: float = 0.0,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Rasterize ``placed`` = [(ObjectSpec, (row, col)), ...], add noise, clip.

    Overlapping objects add before clipping.
    """
    frame = _rasterize(placed, extents)
    if noise_prob > 0:
        frame = add_noise(frame, noise_prob, rng)
    return np.clip(frame, 0.0, 1.0)


def _object_layer(obj: ObjectSpec, path: np.ndarray, extents) -> np.ndarray:
    """``(T, H, W)`` rendering of one object along its trajectory."""
    e = obj.half_extent
    H, W = extents
    layer = np.zeros((len(path), H + 2 * e, W + 2 * e))
    sprite = obj.intensity * _template(obj.shape, e)
    for t, (r, c) in enumerate(np.rint(path).astype(int) + e):
        if e <= r < H + e and e <= c < W + e:
            layer[t, r - e:r + e + 1, c - e:c + e + 1] += sprite
    return layer[:, e:e + H, e:e + W]


def make_episode(spec: TaskSpec, rng: np.random.Generator) -> Episode:
    paths = [sample_trajectory(rng, spec.horizon, spec.extents, spec.max_speed,
                               spec.reset_prob, obj.half_extent) for obj in spec.objects]
    inputs = np.zeros((spec.horizon, *spec.extents))
    targets = np.zeros_like(inputs)
    for obj, path in zip(spec.objects, paths):
        layer = _object_layer(obj, path, spec.extents)
        inputs += layer
        if obj.is_target:
            targets += layer
    if spec.noise_prob > 0:
        inputs = add_noise(inputs, spec.noise_prob, rng)
    return Episode(np.clip(inputs, 0, 1).astype(np.float32),
                   np.clip(targets, 0, 1).astype(np.float32), spec.cost_weights())


def make_static_episode(image: np.ndarray, horizon: int, warmup: int,
                        poisson_rate: float | None = None) -> Episode:
    frames = np.repeat(np.asarray(image, dtype=np.float32)[None], horizon, axis=0)
    return Episode(frames, frames.copy(), poisson_weights(poisson_rate, horizon, warmup))


def stack_episodes(episodes: list[Episode]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([e.inputs for e in episodes]), np.stack([e.targets for e in episodes]))


def episode_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Independent generator for episode ``index`` of ``stream`` under ``seed``."""
    return np.random.default_rng([seed, stream, index])


# --- file formats ---------------------------------------------------------

IDX_UBYTE_RANK3 = 0x00000803


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def load_idx(path) -> np.ndarray:
    """Read a uint8 rank-3 IDX image file, scaled to [0, 1] as float32."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_UBYTE_RANK3:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at offset 0")
    need = n * rows * cols
    if len(raw) - 16 < need:
        raise FormatError(f"{path}: payload truncated at offset {len(raw)}, "
                          f"expected {16 + need} bytes")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=16)
    return pixels.reshape(n, rows, cols).astype(np.float32) / 255.0


def save_idx(path, images: np.ndarray):
    """Write ``(N, H, W)`` uint8 images (or [0, 1] floats, rounded) as IDX."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255), 0, 255).astype(np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_UBYTE_RANK3, n, rows, cols))
        f.write(images.tobytes())


def write_pgm(path, image: np.ndarray, comment: str | None = None):
    """Write a [0, 1] float image as 8-bit binary PGM, with an optional header comment."""
    img = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n")
        if comment:
            f.write(b"# " + comment.replace("\n", " ").encode("utf-8") + b"\n")
        f.write(b"%d %d\n255\n" % (w, h))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header at offset {pos}")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r}) at offset 0")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    pos += 1
    if len(raw) - pos < w * h:
        raise FormatError(f"{path}: pixel data truncated at offset {len(raw)}")
    img = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return img.astype(np.float32) / maxval


def load_pgm_dir(path) -> np.ndarray:
    """Load every ``*.pgm`` in a directory (sorted by name); all must share extents."""
    files = sorted(Path(path).glob("*.pgm"))
    if not files:
        raise FormatError(f"{path}: no .pgm images found")
    images = [read_pgm(p) for p in files]
    if len({im.shape for im in images}) != 1:
        raise FormatError(f"{path}: images have differing extents")
    return np.stack(images)


def load_images(path) -> np.ndarray:
    return load_pgm_dir(path) if os.path.isdir(path) else load_idx(path)


EPISODE_MAGIC = b"GLEP"
EPISODE_VERSION = 1


def save_episode(path, episode: Episode):
    T, H, W = episode.inputs.shape
    with open(path, "wb") as f:
        f.write(EPISODE_MAGIC + struct.pack("<IIII", EPISODE_VERSION, H, W, T))
        f.write(np.ascontiguousarray(episode.inputs, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(episode.targets, dtype="<f4").tobytes())


def load_episode(path, weights: CostWeights | None = None) -> Episode:
    """Read a GLEP file.  Cost weights are not stored; pass them or get the
    default schedule with zero warm-up."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != EPISODE_MAGIC:
        raise FormatError(f"{path}: bad episode magic at offset 0")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header at offset {len(raw)}")
    version, H, W, T = struct.unpack("<IIII", raw[4:20])
    if version != EPISODE_VERSION:
        raise FormatError(f"{path}: unsupported episode version {version} at offset 4")
    n = T * H * W
    if len(raw) < 20 + 8 * n:
        raise FormatError(f"{path}: payload truncated at offset {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=2 * n, offset=20).astype(np.float32)
    inputs, targets = data[:n].reshape(T, H, W), data[n:].reshape(T, H, W)
    return Episode(inputs, targets, weights if weights is not None else poisson_weights(None, T, 0))
