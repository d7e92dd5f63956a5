"""Named task sources used by the harness and CLI."""

from __future__ import annotations

import gzip
import importlib.util
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .data import (ObjectSpec, TaskSpec, episode_rng, load_images, make_episode,
                   make_static_episode, stack_episodes)
from .objective import CostWeights, poisson_weights

TRAIN, EVAL, BASELINE = 0, 1, 2

VIDEO_TASKS = {
    # one cross target, one circle distractor
    "track-1": [ObjectSpec("cross"), ObjectSpec("circle", is_target=False)],
    # one cross target, two circle distractors
    "track-1-2d": [ObjectSpec("cross"), ObjectSpec("circle", is_target=False),
                   ObjectSpec("circle", is_target=False)],
    # two cross targets, one circle distractor
    "track-2-1d": [ObjectSpec("cross"), ObjectSpec("cross"),
                   ObjectSpec("circle", is_target=False)],
    # a cross and a circle, both targets
    "track-cross-circle": [ObjectSpec("cross"), ObjectSpec("circle")],
}
STATIC_TASKS = ("hurried-copy",)
TASK_NAMES = tuple(VIDEO_TASKS) + STATIC_TASKS


@dataclass
class VideoSource:
    spec: TaskSpec
    scales: tuple[str, ...] = ("1x", "2x")

    @property
    def image_shape(self):
        return self.spec.extents

    @property
    def weights(self) -> CostWeights:
        return self.spec.cost_weights()

    def episode(self, seed, stream, index):
        return make_episode(self.spec, episode_rng(seed, stream, index))

    def batch(self, seed, stream, start, n):
        return stack_episodes([self.episode(seed, stream, start + i) for i in range(n)])

    def mean_target(self, seed, n=512) -> np.ndarray:
        _, targets = self.batch(seed, BASELINE, 0, n)
        return targets.mean(axis=(0, 1))


@dataclass
class StaticSource:
    """Hurried copying: each episode shows one image for ``horizon`` steps.

    Images are put in a fixed pseudo-random order (files are often sorted by
    class); the first ``train_fraction`` feed training and the rest are held
    out for evaluation.
    """

    images: np.ndarray
    horizon: int = 8
    warmup: int = 2
    poisson_rate: float | None = None
    train_fraction: float = 0.8
    scales: tuple[str, ...] = ("1x",)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def weights(self) -> CostWeights:
        return poisson_weights(self.poisson_rate, self.horizon, self.warmup)

    @cached_property
    def _pools(self):
        order = np.random.default_rng(0).permutation(len(self.images))
        cut = max(1, int(len(order) * self.train_fraction))
        held_out = order[cut:] if cut < len(order) else order[:cut]
        return self.images[np.sort(order[:cut])], self.images[np.sort(held_out)]

    def _split(self, stream):
        return self._pools[1] if stream == EVAL else self._pools[0]

    def episode(self, seed, stream, index):
        pool = self._split(stream)
        pick = episode_rng(seed, stream, index).integers(len(pool))
        return make_static_episode(pool[pick], self.horizon, self.warmup, self.poisson_rate)

    def batch(self, seed, stream, start, n):
        return stack_episodes([self.episode(seed, stream, start + i) for i in range(n)])

    def mean_target(self, seed, n=None) -> np.ndarray:
        return self._split(TRAIN).mean(axis=0)


def bundled_digits_path() -> str:
    """Location of the 5000 MNIST digits shipped inside ``mlxtend`` (CSV, label last)."""
    spec = importlib.util.find_spec("mlxtend")
    if spec is None:
        raise FileNotFoundError("no image data given and mlxtend (bundled MNIST subset) "
                                "is not installed")
    return os.path.join(os.path.dirname(spec.origin), "data", "data", "mnist_5k.csv.gz")


def bundled_digits() -> np.ndarray:
    with gzip.open(bundled_digits_path(), "rt") as f:
        rows = np.loadtxt(f, delimiter=",", dtype=np.float32)
    return (rows[:, :784] / 255.0).reshape(-1, 28, 28)


def make_source(task: str, data_path: str | None = None, **overrides):
    if task in VIDEO_TASKS:
        return VideoSource(TaskSpec(objects=VIDEO_TASKS[task], **overrides))
    if task in STATIC_TASKS:
        images = load_images(data_path) if data_path else bundled_digits()
        return StaticSource(images, **overrides)
    raise ValueError(f"unknown task {task!r}; choose from {', '.join(TASK_NAMES)}")
