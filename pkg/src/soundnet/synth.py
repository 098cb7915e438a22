"""Synthetic clips and teachers for desk-scale experiments.

Three signal families (pure tone, white noise, linear chirp) plus two kinds of
fake teacher: fixed random posteriors, and a rule-based teacher whose peak
classes depend on the signal family.
"""
from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from .audio import TARGET_RANGE, TARGET_RATE
from .network import HeadSplit

CLASSES = ("tone", "noise", "chirp")


def tone(rng: np.random.Generator, seconds: float, rate: int = TARGET_RATE) -> np.ndarray:
    t = np.arange(int(round(seconds * rate))) / rate
    freq = rng.uniform(300, 1200)
    return rng.uniform(0.3, 0.8) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))


def noise(rng: np.random.Generator, seconds: float, rate: int = TARGET_RATE) -> np.ndarray:
    n = int(round(seconds * rate))
    return np.clip(rng.normal(0, rng.uniform(0.1, 0.3), size=n), -1, 1)


def chirp(rng: np.random.Generator, seconds: float, rate: int = TARGET_RATE) -> np.ndarray:
    t = np.arange(int(round(seconds * rate))) / rate
    f0, f1 = rng.uniform(200, 600), rng.uniform(2000, 5000)
    phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / seconds * t * t)
    return rng.uniform(0.3, 0.8) * np.sin(phase)


GENERATORS = {"tone": tone, "noise": noise, "chirp": chirp}


def make_clip(kind: str, rng: np.random.Generator, seconds: float) -> np.ndarray:
    """A clip of the given family, already scaled to the [-256, 256] network range."""
    return GENERATORS[kind](rng, seconds) * TARGET_RANGE


def make_dataset(per_class: int, seconds: float, seed: int) -> Tuple[List[np.ndarray], List[str]]:
    rng = np.random.default_rng(seed)
    clips, labels = [], []
    for i in range(per_class):
        for kind in CLASSES:
            clips.append(make_clip(kind, rng, seconds))
            labels.append(kind)
    return clips, labels


def overfit_clips(rng: np.random.Generator, count: int = 8, seconds: float = 1.0) -> List[np.ndarray]:
    """Pure tones of random frequency, amplitude and phase: a fixture every model here can fit.

    Broadband noise and fast chirps are left out on purpose, since the
    autoencoder's bottleneck cannot carry them and reconstruction would stall.
    """
    return [make_clip("tone", rng, seconds) for _ in range(count)]


def random_posteriors(rng: np.random.Generator, steps: int, split: HeadSplit = HeadSplit(), sharpness: float = 3.0) -> np.ndarray:
    """``(steps, classes)`` teacher distributions from softmaxed Gaussian logits, one per head."""
    out = np.empty((steps, split.total))
    for sl in split.slices():
        z = sharpness * rng.normal(size=(steps, sl.stop - sl.start))
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        out[:, sl] = e / e.sum(axis=1, keepdims=True)
    return out


def rule_teacher(label: str, steps: int, classes: Sequence[str] = CLASSES, split: HeadSplit = HeadSplit(), peak: float = 6.0) -> np.ndarray:
    """Posteriors that peak on a label-dependent object class and scene class."""
    k = list(classes).index(label)
    out = np.empty((steps, split.total))
    for head, sl in enumerate(split.slices()):
        z = np.zeros(sl.stop - sl.start)
        z[(k * 37 + head * 11) % len(z)] = peak
        e = np.exp(z - z.max())
        out[:, sl] = e / e.sum()
    return out
