"""Distillation and autoencoder training: losses, Adam, the loops, gradient checking."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import network as N
from .formats import Checkpoint, save_checkpoint
from .network import HeadSplit, LayerSpec, NetworkConfig, Parameters
from .tensor import ShapeError, kl_floored_gradient, kl_terms, softmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 64
    max_iterations: int = 100_000
    seed: int = 0
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iterations < 0 or self.checkpoint_interval < 1:
            raise ValueError("max_iterations must be >= 0 and checkpoint_interval >= 1")


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(
    params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState, config: TrainConfig
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new parameter and state dicts; inputs are untouched."""
    if set(params) != set(grads) or set(params) != set(state.m):
        missing = set(params) ^ set(grads)
        raise ShapeError(f"parameter, gradient and state keys differ: {sorted(missing | (set(params) ^ set(state.m)))}")
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        g = g.astype(p.dtype, copy=False)
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * (g * g)
        update = config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_epsilon)
        new_p[k] = (p - update).astype(p.dtype, copy=False)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _align(output: np.ndarray, teacher: np.ndarray, split: HeadSplit) -> np.ndarray:
    output = np.asarray(output)
    teacher = np.asarray(teacher)
    if output.ndim != 3 or output.shape[1] != split.total:
        raise ShapeError(f"student output must be (batch, {split.total}, T), got {output.shape}")
    b, _, steps = output.shape
    if teacher.shape != (b, steps, split.total):
        raise ValueError(
            f"teacher posteriors {teacher.shape} are misaligned with student output: "
            f"expected (batch={b}, timesteps={steps}, {split.total})"
        )
    return teacher


def distill_loss(output: np.ndarray, teacher: np.ndarray, split: HeadSplit = HeadSplit()) -> Tuple[float, np.ndarray]:
    """KL(teacher || softmax(student)) summed over heads, averaged over batch and timesteps.

    ``output`` is ``(batch, classes, T)`` logits; ``teacher`` is ``(batch, T, classes)``.
    Returns the scalar loss and its gradient w.r.t. ``output``.
    """
    teacher = _align(output, teacher, split)
    b, _, steps = output.shape
    loss = 0.0
    grad = np.empty_like(output)
    for sl in split.slices():
        p = teacher[:, :, sl].transpose(0, 2, 1)
        q = softmax(output[:, sl], axis=1)
        loss += float(kl_terms(p, q, axis=1).mean())
        grad[:, sl] = kl_floored_gradient(p, q, axis=1) / (b * steps)
    return loss, grad


def l2_loss(output: np.ndarray, teacher: np.ndarray, split: HeadSplit = HeadSplit()) -> Tuple[float, np.ndarray]:
    """Squared distance between softmaxed student outputs and teacher distributions, reduced like ``distill_loss``."""
    teacher = _align(output, teacher, split)
    b, _, steps = output.shape
    loss = 0.0
    grad = np.empty_like(output)
    for sl in split.slices():
        p = teacher[:, :, sl].transpose(0, 2, 1)
        q = softmax(output[:, sl], axis=1)
        diff = q - p
        loss += float((diff * diff).sum(axis=1).mean())
        d = 2 * diff / (b * steps)
        grad[:, sl] = q * (d - (q * d).sum(axis=1, keepdims=True))
    return loss, grad


def mse_loss(reconstruction: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    if reconstruction.shape != target.shape:
        raise ShapeError(f"reconstruction {reconstruction.shape} vs target {target.shape}")
    diff = reconstruction - target
    return float(np.mean(diff.astype(np.float64) ** 2)), (2.0 / diff.size) * diff


LOSSES = {"kl": distill_loss, "l2": l2_loss}


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

@dataclass
class DistillSample:
    waveform: np.ndarray  # (length,) preprocessed samples
    teacher: np.ndarray  # (timesteps, 1401)
    clip_id: str = ""


@dataclass
class TrainResult:
    params: Parameters
    losses: List[float]
    state: AdamState
    checkpoints: List[Path] = field(default_factory=list)


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of index batches; the order is reshuffled at every epoch."""
    size = min(batch_size, n)
    while True:
        order = rng.permutation(n)
        for start in range(0, n, size):
            yield order[start:start + size]


def _stack_waveforms(waves: Sequence[np.ndarray]) -> np.ndarray:
    lengths = {len(w) for w in waves}
    if len(lengths) != 1:
        raise ValueError(f"all training clips must have the same length, got lengths {sorted(lengths)}")
    return np.stack([np.asarray(w, dtype=np.float32) for w in waves])[:, None, :]


class _Metrics:
    def __init__(self, path: Optional[Path]):
        self.fh = open(path, "w") if path else None
        self.start = time.perf_counter()

    def write(self, iteration: int, loss: float):
        if self.fh:
            ms = (time.perf_counter() - self.start) * 1000
            self.fh.write(f"{iteration}\t{ms:.1f}\t{loss:.8g}\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _run(
    net: NetworkConfig,
    params: Parameters,
    inputs: np.ndarray,
    loss_fn: Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]],
    config: TrainConfig,
    checkpoint_dir: Optional[Path],
    metrics_path: Optional[Path],
    callback: Optional[Callable[[int, float], Optional[bool]]],
) -> TrainResult:
    rng = np.random.default_rng(config.seed)
    batches = shuffled_batches(len(inputs), config.batch_size, rng)
    state = AdamState.zeros_like(params.arrays)
    losses: List[float] = []
    written: List[Path] = []
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    metrics = _Metrics(Path(metrics_path) if metrics_path else None)
    try:
        for it in range(1, config.max_iterations + 1):
            idx = next(batches)
            res = N.forward(net, params, inputs[idx], "train", keep_cache=True)
            loss, grad = loss_fn(res.output, idx)
            if not math.isfinite(loss):
                raise FloatingPointError(f"loss became {loss} at iteration {it}")
            grads = N.backward(net, params, res, grad)
            arrays, state = adam_step(params.arrays, grads, state, config)
            params = Parameters(arrays, {**params.stats, **res.stats}, params.seed)
            losses.append(loss)
            metrics.write(it, loss)
            stop = bool(callback(it, loss)) if callback else False
            last = stop or it == config.max_iterations
            if checkpoint_dir is not None and (it % config.checkpoint_interval == 0 or last):
                path = checkpoint_dir / f"checkpoint_{it:06d}.sndc"
                save_checkpoint(path, Checkpoint.from_params(net, params, it, loss))
                written.append(path)
            if stop:
                log.info("stopped by callback at iteration %d", it)
                break
    finally:
        metrics.close()
    return TrainResult(params, losses, state, written)


def train_distill(
    samples: Sequence[DistillSample],
    net: NetworkConfig,
    config: TrainConfig,
    loss: str = "kl",
    params: Optional[Parameters] = None,
    split: HeadSplit = HeadSplit(),
    checkpoint_dir: Optional[Path] = None,
    metrics_path: Optional[Path] = None,
    callback: Optional[Callable[[int, float], Optional[bool]]] = None,
) -> TrainResult:
    """Mini-batch Adam on the distillation objective.

    Clips must share one length, and each teacher sequence must already have
    exactly as many timesteps as the student emits for that length. ``callback``
    sees ``(iteration, loss)`` after every step; returning True ends training.
    """
    if loss not in LOSSES:
        raise ValueError(f"loss must be one of {sorted(LOSSES)}, got {loss!r}")
    if not samples:
        raise ValueError("no training samples")
    inputs = _stack_waveforms([s.waveform for s in samples])
    steps = net.output_lengths(inputs.shape[2])[net.layers[-1].name]
    for s in samples:
        if s.teacher.shape != (steps, split.total):
            raise ValueError(
                f"clip {s.clip_id or '?'}: teacher has shape {s.teacher.shape}, student emits "
                f"{steps} timesteps x {split.total} classes for {inputs.shape[2]} samples"
            )
    teachers = np.stack([s.teacher.astype(np.float32) for s in samples])
    if params is None:
        params = N.init_params(net, config.seed)
    fn = LOSSES[loss]
    log.info("distillation: %d clips of %d samples, %d timesteps, loss=%s", len(samples), inputs.shape[2], steps, loss)
    return _run(net, params, inputs, lambda out, idx: fn(out, teachers[idx], split), config, checkpoint_dir, metrics_path, callback)


def train_autoencoder(
    waveforms: Sequence[np.ndarray],
    config: TrainConfig,
    net: Optional[NetworkConfig] = None,
    params: Optional[Parameters] = None,
    checkpoint_dir: Optional[Path] = None,
    metrics_path: Optional[Path] = None,
    callback: Optional[Callable[[int, float], Optional[bool]]] = None,
) -> TrainResult:
    """Reconstruction training with mean squared error.

    Clips are cropped to the longest length the autoencoder reproduces exactly.
    """
    net = net or N.build_autoencoder4()
    inputs = _stack_waveforms(waveforms)
    length = N.round_trip_length(net, inputs.shape[2])
    inputs = np.ascontiguousarray(inputs[:, :, :length])
    if params is None:
        params = N.init_params(net, config.seed)
    log.info("autoencoder: %d clips cropped to %d samples", len(inputs), length)
    return _run(net, params, inputs, lambda out, idx: mse_loss(out, inputs[idx]), config, checkpoint_dir, metrics_path, callback)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_layer: Dict[str, Tuple[str, float]]  # layer -> (worst parameter entry, relative error)
    checked: int
    skipped_kinks: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol

    def format(self) -> str:
        lines = [f"{'layer':<16}{'worst entry':<28}{'rel. error':>12}"]
        for layer, (entry, err) in self.per_layer.items():
            lines.append(f"{layer:<16}{entry:<28}{err:>12.3e}")
        lines.append(f"max relative error {self.max_rel_error:.3e} over {self.checked} parameters ({self.skipped_kinks} resampled at kinks)")
        return "\n".join(lines)


def _kink_signature(net: NetworkConfig, res: N.ForwardResult) -> List[np.ndarray]:
    sig = []
    for layer, (inp, entry) in zip(net.layers, res.cache):
        if layer.kind == N.RELU:
            sig.append(inp > 0)
        elif layer.kind == N.MAXPOOL:
            sig.append(entry)
    return sig


def gradient_check(
    net: NetworkConfig,
    params: Parameters,
    x: np.ndarray,
    n_samples: int = 200,
    seed: int = 0,
    step: float = 1e-6,
    mode: str = "train",
    backward_fn: Callable = N.backward,
) -> GradCheckReport:
    """Compare backprop against central differences on a random sample of parameters.

    Runs in float64 with the loss ``sum(R * output)`` for a fixed random ``R``.
    A sampled entry whose +/- step changes any ReLU mask or pooling argmax is
    discarded and redrawn, since central differences are meaningless across a
    kink. Errors are reported per layer as max-norm relative errors; the
    denominator is floored at 1e-6 of the largest gradient seen so that layers
    with identically zero gradients compare by absolute error.
    """
    rng = np.random.default_rng(seed)
    p64 = params.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    base = N.forward(net, p64, x, mode, keep_cache=True)
    proj = rng.normal(size=base.output.shape)
    analytic = backward_fn(net, p64, base, proj)
    base_sig = _kink_signature(net, base)

    keys = sorted(p64.arrays)
    sizes = np.array([p64.arrays[k].size for k in keys])
    probs = sizes / sizes.sum()

    def loss_and_sig():
        r = N.forward(net, p64, x, mode, keep_cache=True)
        return float((r.output * proj).sum()), _kink_signature(net, r)

    pairs: Dict[str, List[Tuple[str, float, float]]] = {}
    checked = skipped = 0
    attempts = 0
    while checked < n_samples and attempts < 20 * n_samples:
        attempts += 1
        key = keys[rng.choice(len(keys), p=probs)]
        arr = p64.arrays[key]
        flat = int(rng.integers(arr.size))
        idx = np.unravel_index(flat, arr.shape)
        old = arr[idx]
        arr[idx] = old + step
        fp, sp = loss_and_sig()
        arr[idx] = old - step
        fm, sm = loss_and_sig()
        arr[idx] = old
        if any(not np.array_equal(a, b) for a, b in zip(sp, base_sig)) or any(
            not np.array_equal(a, b) for a, b in zip(sm, base_sig)
        ):
            skipped += 1
            continue
        numeric = (fp - fm) / (2 * step)
        layer = key.rsplit(".", 1)[0]
        pairs.setdefault(layer, []).append((f"{key}{[int(i) for i in idx]}", float(analytic[key][idx]), numeric))
        checked += 1

    scale = max((max(abs(a), abs(n)) for v in pairs.values() for _, a, n in v), default=0.0)
    floor = max(1e-6 * scale, 1e-300)
    per_layer: Dict[str, Tuple[str, float]] = {}
    worst = 0.0
    for layer in sorted(pairs, key=lambda l: next(i for i, s in enumerate(net.layers) if s.name == l)):
        entries = pairs[layer]
        denom = max(max(max(abs(a), abs(n)) for _, a, n in entries), floor)
        name, a, n = max(entries, key=lambda e: abs(e[1] - e[2]))
        err = abs(a - n) / denom
        per_layer[layer] = (name, err)
        worst = max(worst, err)
    return GradCheckReport(worst, per_layer, checked, skipped)


def toy_network(scale: str = "tiny") -> Tuple[NetworkConfig, int]:
    """Small built-in networks for gradient checking, with an input length for each."""
    if scale == "tiny":
        layers = (
            LayerSpec("conv1", N.CONV, 1, 4, 8, 2, 4), LayerSpec("conv1/bn", N.BATCHNORM, 4, 4), LayerSpec("conv1/relu", N.RELU, 4, 4),
            LayerSpec("pool1", N.MAXPOOL, kernel_size=4, stride=4),
            LayerSpec("conv2", N.CONV, 4, 6, 4, 2, 2), LayerSpec("conv2/bn", N.BATCHNORM, 6, 6), LayerSpec("conv2/relu", N.RELU, 6, 6),
            LayerSpec("conv3", N.CONV, 6, 5, 3, 1, 0),
        )
        return NetworkConfig("toy-tiny", layers, ("conv1", "pool1", "conv2", "conv3")), 96
    if scale == "small":
        net = N.build_autoencoder4((2, 3, 4, 4))
        return net, N.round_trip_length(net, 600)
    raise ValueError(f"unknown gradcheck scale {scale!r}; choose 'tiny' or 'small'")


def run_gradcheck(scale: str = "tiny", n_samples: int = 200, seed: int = 0, backward_fn: Callable = N.backward) -> GradCheckReport:
    net, length = toy_network(scale)
    rng = np.random.default_rng(seed)
    params = N.init_params(net, seed, std=0.3, dtype=np.float64)
    for k in params.arrays:
        if k.endswith((".bias", ".beta")):
            params.arrays[k] = rng.normal(scale=0.1, size=params.arrays[k].shape)
    x = rng.normal(size=(2, 1, length))
    return gradient_check(net, params, x, n_samples=n_samples, seed=seed, backward_fn=backward_fn)
