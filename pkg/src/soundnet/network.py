"""Network definitions, parameter initialisation and layer-by-layer execution.

A network is an ordered list of :class:`LayerSpec`. Convolutions that are
followed by batch normalisation and ReLU carry them as separate layers named
``<conv>/bn`` and ``<conv>/relu``; asking for the tap ``conv5`` returns the
activation at the end of that block, i.e. after its ReLU.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import BatchNormParams, ConvParams, InputTooShortError, ShapeError

CONV = "conv"
TRANSPOSED = "transposed_conv"
MAXPOOL = "maxpool"
BATCHNORM = "batchnorm"
RELU = "relu"
KINDS = (CONV, TRANSPOSED, MAXPOOL, BATCHNORM, RELU)

OBJECT_CLASSES = 1000
SCENE_CLASSES = 401
OUTPUT_CHANNELS = OBJECT_CLASSES + SCENE_CLASSES

INIT_STD = 0.01


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"layer {self.name}: unknown kind {self.kind!r}")
        if self.kind in (CONV, TRANSPOSED):
            if min(self.in_channels, self.out_channels, self.kernel_size, self.stride) < 1 or self.padding < 0:
                raise ValueError(f"layer {self.name}: invalid convolution geometry")
        if self.kind == MAXPOOL and min(self.kernel_size, self.stride) < 1:
            raise ValueError(f"layer {self.name}: invalid pool geometry")

    @property
    def has_params(self) -> bool:
        return self.kind in (CONV, TRANSPOSED, BATCHNORM)

    def output_length(self, length: int) -> int:
        if self.kind == CONV:
            return T.conv_output_length(length, self.kernel_size, self.stride, self.padding)
        if self.kind == TRANSPOSED:
            return T.transposed_output_length(length, self.kernel_size, self.stride, self.padding)
        if self.kind == MAXPOOL:
            return T.pool_output_length(length, self.kernel_size, self.stride)
        return length

    def min_input_length(self, min_output: int) -> int:
        """Smallest input length for which ``output_length`` reaches ``min_output``."""
        if self.kind == CONV:
            return T.conv_min_input_length(self.kernel_size, self.stride, self.padding, min_output)
        if self.kind == TRANSPOSED:
            need = min_output - self.kernel_size + 2 * self.padding
            return max(1, -(-need // self.stride) + 1)
        if self.kind == MAXPOOL:
            return (min_output - 1) * self.stride + self.kernel_size
        return max(1, min_output)


@dataclass(frozen=True)
class NetworkConfig:
    name: str
    layers: Tuple[LayerSpec, ...]
    taps: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "taps", tuple(self.taps))
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"{self.name}: duplicate layer names")
        if not self.layers:
            raise ValueError(f"{self.name}: no layers")
        channels = None
        for layer in self.layers:
            if layer.kind in (CONV, TRANSPOSED):
                if channels is not None and layer.in_channels != channels:
                    raise ValueError(
                        f"{self.name}: layer {layer.name} expects {layer.in_channels} channels, "
                        f"previous layer produces {channels}"
                    )
                channels = layer.out_channels
            elif layer.kind == BATCHNORM and layer.in_channels != channels:
                raise ValueError(f"{self.name}: batchnorm {layer.name} has {layer.in_channels} channels, expected {channels}")
        for tap in self.taps:
            self.resolve_tap(tap)

    @property
    def in_channels(self) -> int:
        return next(l.in_channels for l in self.layers if l.kind in (CONV, TRANSPOSED))

    @property
    def out_channels(self) -> int:
        return [l.out_channels for l in self.layers if l.kind in (CONV, TRANSPOSED)][-1]

    def layer_index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    def resolve_tap(self, tap: str) -> int:
        """Index of the last layer belonging to block ``tap``."""
        idx = None
        for i, layer in enumerate(self.layers):
            if layer.name == tap or layer.name.startswith(tap + "/"):
                idx = i
        if idx is None:
            raise KeyError(f"unknown layer {tap!r}; valid taps: {', '.join(self.taps)}")
        return idx

    def output_lengths(self, length: int, stop_at: Optional[str] = None) -> Dict[str, int]:
        """Per-layer output lengths for an input of ``length`` samples (shape law only)."""
        last = len(self.layers) - 1 if stop_at is None else self.resolve_tap(stop_at)
        out = {}
        for layer in self.layers[:last + 1]:
            length = layer.output_length(length)
            out[layer.name] = length
        return out

    def min_input_length(self, stop_at: Optional[str] = None) -> int:
        """Smallest input length for which every layer (up to ``stop_at``) yields >= 1 position."""
        last = len(self.layers) - 1 if stop_at is None else self.resolve_tap(stop_at)
        need = 1
        for layer in reversed(self.layers[:last + 1]):
            need = layer.min_input_length(need)
        return need

    def describe(self) -> str:
        """JSON description of the layer list (used for custom networks in checkpoints)."""
        layers = [
            {k: v for k, v in vars(l).items() if v != LayerSpec.__dataclass_fields__[k].default or k in ("name", "kind")}
            for l in self.layers
        ]
        return json.dumps({"name": self.name, "taps": list(self.taps), "layers": layers}, separators=(",", ":"))

    @classmethod
    def from_description(cls, text: str) -> "NetworkConfig":
        d = json.loads(text)
        return cls(d["name"], tuple(LayerSpec(**l) for l in d["layers"]), tuple(d["taps"]))


@dataclass(frozen=True)
class HeadSplit:
    objects: int = OBJECT_CLASSES
    scenes: int = SCENE_CLASSES

    @property
    def object_range(self) -> range:
        return range(0, self.objects)

    @property
    def scene_range(self) -> range:
        return range(self.objects, self.objects + self.scenes)

    @property
    def total(self) -> int:
        return self.objects + self.scenes

    def slices(self) -> Tuple[slice, slice]:
        return slice(0, self.objects), slice(self.objects, self.total)


# --------------------------------------------------------------------------
# built-in architectures
# --------------------------------------------------------------------------

def _conv_block(name, cin, cout, k, s, p, norm=True, kind=CONV) -> List[LayerSpec]:
    layers = [LayerSpec(name, kind, cin, cout, k, s, p)]
    if norm:
        layers += [LayerSpec(f"{name}/bn", BATCHNORM, cout, cout), LayerSpec(f"{name}/relu", RELU, cout, cout)]
    return layers


def _pool(name, size, stride=None) -> LayerSpec:
    return LayerSpec(name, MAXPOOL, kernel_size=size, stride=size if stride is None else stride)


def _block_names(layers: Iterable[LayerSpec]) -> Tuple[str, ...]:
    return tuple(l.name for l in layers if "/" not in l.name)


# conv geometry rows of the 8-layer table: (name, filters, kernel, stride, padding); pools: (name, size)
SOUNDNET8_TABLE = (
    ("conv1", 16, 64, 2, 32), ("pool1", 8), ("conv2", 32, 32, 2, 16), ("pool2", 8),
    ("conv3", 64, 16, 2, 8), ("conv4", 128, 8, 2, 4), ("conv5", 256, 4, 2, 2), ("pool5", 4),
    ("conv6", 512, 4, 2, 2), ("conv7", 1024, 4, 2, 2), ("conv8", 1401, 8, 2, 0),
)

SOUNDNET5_TABLE = (
    ("conv1", 32, 64, 2, 32), ("pool1", 8), ("conv2", 64, 32, 2, 16), ("pool2", 8),
    ("conv3", 128, 16, 2, 8), ("pool3", 8), ("conv4", 256, 8, 2, 4), ("conv5", 1401, 16, 12, 4),
)


def _from_table(name: str, table, width_divisor: int = 1) -> NetworkConfig:
    layers: List[LayerSpec] = []
    channels = 1
    last_conv = max(i for i, row in enumerate(table) if len(row) == 5)
    for i, row in enumerate(table):
        if len(row) == 2:
            layers.append(_pool(*row))
            continue
        lname, filters, k, s, p = row
        final = i == last_conv
        out = filters if final else max(1, filters // width_divisor)
        layers += _conv_block(lname, channels, out, k, s, p, norm=not final)
        channels = out
    return NetworkConfig(name, tuple(layers), _block_names(layers))


def build_soundnet8() -> NetworkConfig:
    """Eight convolutions and three max-pools; conv8 emits 1401 logits per timestep."""
    return _from_table("soundnet8", SOUNDNET8_TABLE)


def build_soundnet5() -> NetworkConfig:
    return _from_table("soundnet5", SOUNDNET5_TABLE)


def build_soundnet8_compact(width_divisor: int = 4, out_channels: int = OUTPUT_CHANNELS) -> NetworkConfig:
    """SoundNet-8 through conv7 at reduced width, with a kernel-1 output layer.

    The full eight-layer network needs roughly 9.5 s of audio before conv8
    produces a single timestep. This variant keeps the geometry of conv1..conv7
    (so pool5 and conv7 taps behave the same) and replaces conv8 by a
    kernel-1, stride-1 convolution, which makes one-second clips admissible.
    """
    table = SOUNDNET8_TABLE[:-1] + (("conv8", out_channels, 1, 1, 0),)
    return _from_table(f"soundnet8-compact-w{width_divisor}", table, width_divisor)


AUTOENCODER_WIDTHS = (16, 32, 64, 128)


def build_autoencoder4(width_schedule: Sequence[int] = AUTOENCODER_WIDTHS) -> NetworkConfig:
    """Four SoundNet-8 encoder convolutions mirrored by four transposed convolutions.

    A decoder layer undoes one encoder stage (a convolution plus its pool, if
    any): its stride is the stage's total downsampling factor and its padding
    is chosen so that ``kernel - 2 * padding == stride``. For inputs that pass
    :func:`is_round_trip_length` the reconstruction has exactly the input length.
    """
    w1, w2, w3, w4 = width_schedule
    enc = SOUNDNET8_TABLE[:6]  # conv1, pool1, conv2, pool2, conv3, conv4
    layers: List[LayerSpec] = []
    channels = 1
    stages = []  # (conv row, pool size or 1)
    for row in enc:
        if len(row) == 2:
            stages[-1] = (stages[-1][0], row[1])
        else:
            stages.append((row, 1))
    widths = (w1, w2, w3, w4)
    for ((lname, _, k, s, p), pool), width in zip(stages, widths):
        layers += _conv_block(lname, channels, width, k, s, p)
        if pool > 1:
            layers.append(_pool(lname.replace("conv", "pool"), pool))
        channels = width
    outs = (1,) + widths[:-1]
    for i in reversed(range(4)):
        (lname, _, k, s, p), pool = stages[i]
        stride = s * pool
        padding = p if pool == 1 else (k - stride) // 2
        name = f"deconv{i + 1}"
        layers += _conv_block(name, channels, outs[i], k, stride, padding, norm=i > 0, kind=TRANSPOSED)
        channels = outs[i]
    return NetworkConfig("autoencoder4", tuple(layers), _block_names(layers))


BUILTINS = {
    "soundnet8": build_soundnet8,
    "soundnet5": build_soundnet5,
    "autoencoder4": build_autoencoder4,
}


def is_round_trip_length(config: NetworkConfig, length: int) -> bool:
    try:
        return length >= config.min_input_length() and config.output_lengths(length)[config.layers[-1].name] == length
    except KeyError:
        return False


def round_trip_length(config: NetworkConfig, max_length: int) -> int:
    """Largest length <= ``max_length`` that an autoencoder reproduces exactly."""
    for length in range(max_length, 0, -1):
        if is_round_trip_length(config, length):
            return length
    raise ValueError(f"{config.name}: no round-trip length <= {max_length}")


def _min_length(config: NetworkConfig) -> int:
    return config.min_input_length()


SOUNDNET8_MIN_LENGTH = _min_length(build_soundnet8())
SOUNDNET5_MIN_LENGTH = _min_length(build_soundnet5())


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass
class Parameters:
    """Learned arrays keyed ``<layer>.<field>`` plus batch-norm running statistics.

    ``arrays`` holds the trainable weight/bias/gamma/beta entries; ``stats``
    holds ``<bn>.running_mean`` / ``<bn>.running_var`` once they have been set.
    """

    arrays: Dict[str, np.ndarray]
    stats: Dict[str, np.ndarray] = field(default_factory=dict)
    seed: Optional[int] = None

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.arrays.items()}, {k: v.copy() for k, v in self.stats.items()}, self.seed)

    def astype(self, dtype) -> "Parameters":
        return Parameters(
            {k: v.astype(dtype) for k, v in self.arrays.items()},
            {k: v.astype(dtype) for k, v in self.stats.items()},
            self.seed,
        )

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def conv(self, layer: LayerSpec) -> ConvParams:
        return ConvParams(self.arrays[f"{layer.name}.weight"], self.arrays[f"{layer.name}.bias"], layer.stride, layer.padding)

    def batchnorm(self, layer: LayerSpec) -> BatchNormParams:
        return BatchNormParams(
            self.arrays[f"{layer.name}.gamma"],
            self.arrays[f"{layer.name}.beta"],
            self.stats.get(f"{layer.name}.running_mean"),
            self.stats.get(f"{layer.name}.running_var"),
        )

    def with_stats(self, stats: Dict[str, np.ndarray]) -> "Parameters":
        merged = dict(self.stats)
        merged.update(stats)
        return replace(self, stats=merged)


def param_shapes(config: NetworkConfig) -> Dict[str, Tuple[int, ...]]:
    shapes = {}
    for layer in config.layers:
        if layer.kind == CONV:
            shapes[f"{layer.name}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel_size)
            shapes[f"{layer.name}.bias"] = (layer.out_channels,)
        elif layer.kind == TRANSPOSED:
            shapes[f"{layer.name}.weight"] = (layer.in_channels, layer.out_channels, layer.kernel_size)
            shapes[f"{layer.name}.bias"] = (layer.out_channels,)
        elif layer.kind == BATCHNORM:
            shapes[f"{layer.name}.gamma"] = (layer.in_channels,)
            shapes[f"{layer.name}.beta"] = (layer.in_channels,)
    return shapes


def init_params(config: NetworkConfig, seed: int, std: float = INIT_STD, dtype=np.float32) -> Parameters:
    """Gaussian N(0, std^2) weights, zero biases, unit gamma, zero beta; running stats unset."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for key, shape in param_shapes(config).items():
        if key.endswith(".weight"):
            arrays[key] = rng.normal(0.0, std, size=shape).astype(dtype)
        elif key.endswith(".gamma"):
            arrays[key] = np.ones(shape, dtype=dtype)
        else:
            arrays[key] = np.zeros(shape, dtype=dtype)
    return Parameters(arrays, {}, seed)


def check_params(config: NetworkConfig, params: Parameters) -> None:
    shapes = param_shapes(config)
    missing = set(shapes) - set(params.arrays)
    extra = set(params.arrays) - set(shapes)
    if missing or extra:
        raise ShapeError(f"parameter keys do not match {config.name}: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for key, shape in shapes.items():
        if params.arrays[key].shape != shape:
            raise ShapeError(f"{key}: shape {params.arrays[key].shape}, expected {shape}")


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------

@dataclass
class ForwardResult:
    output: np.ndarray
    activations: Dict[str, np.ndarray]
    stats: Dict[str, np.ndarray]
    cache: Optional[list] = None
    mode: str = "eval"


def forward(
    config: NetworkConfig,
    params: Parameters,
    x: np.ndarray,
    mode: str = "eval",
    stop_at: Optional[str] = None,
    keep_cache: bool = False,
) -> ForwardResult:
    """Run the network on a ``(batch, 1, length)`` waveform tensor.

    ``activations`` maps every tap (up to ``stop_at``) to its output.
    In train mode ``stats`` holds the updated batch-norm running statistics;
    apply them with ``params.with_stats``. ``keep_cache`` retains what
    :func:`backward` needs.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1] != config.in_channels:
        raise ShapeError(f"input must be (batch, {config.in_channels}, length), got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("input contains NaN or Inf")
    last = len(config.layers) - 1 if stop_at is None else config.resolve_tap(stop_at)
    min_len = config.min_input_length(stop_at)
    if x.shape[2] < min_len:
        raise InputTooShortError(f"{config.name} got {x.shape[2]} samples", min_len)

    tap_ends = {}
    for tap in config.taps:
        tap_ends.setdefault(config.resolve_tap(tap), []).append(tap)

    activations: Dict[str, np.ndarray] = {}
    stats: Dict[str, np.ndarray] = {}
    cache = [] if keep_cache else None
    h = x
    for i, layer in enumerate(config.layers[:last + 1]):
        inp = h
        entry = None
        if layer.kind == CONV:
            h = T.conv1d_forward(inp, params.conv(layer))
        elif layer.kind == TRANSPOSED:
            h = T.transposed_conv1d_forward(inp, params.conv(layer))
        elif layer.kind == MAXPOOL:
            h, entry = T.maxpool1d_forward(inp, layer.kernel_size, layer.stride)
        elif layer.kind == BATCHNORM:
            h, updated, entry = T.batchnorm_forward(inp, params.batchnorm(layer), mode)
            if mode == "train":
                stats[f"{layer.name}.running_mean"] = updated.running_mean
                stats[f"{layer.name}.running_var"] = updated.running_var
        elif layer.kind == RELU:
            h = T.relu_forward(inp)
        if keep_cache:
            cache.append((inp, entry))
        for tap in tap_ends.get(i, ()):
            activations[tap] = h
    return ForwardResult(h, activations, stats, cache, mode)


def backward(config: NetworkConfig, params: Parameters, result: ForwardResult, grad_output: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every trainable array, given d(loss)/d(output)."""
    if result.cache is None:
        raise ValueError("forward was run without keep_cache=True")
    grads: Dict[str, np.ndarray] = {}
    g = np.asarray(grad_output)
    if g.shape != result.output.shape:
        raise ShapeError(f"grad_output has shape {g.shape}, expected {result.output.shape}")
    n = len(result.cache)
    for i, layer, (inp, entry) in zip(range(n - 1, -1, -1), reversed(config.layers[:n]), reversed(result.cache)):
        if layer.kind == CONV:
            # the waveform gradient is never needed
            g, gw, gb = T.conv1d_backward(inp, params.conv(layer), g, input_grad=i > 0)
        elif layer.kind == TRANSPOSED:
            g, gw, gb = T.transposed_conv1d_backward(inp, params.conv(layer), g)
        elif layer.kind == MAXPOOL:
            g = T.maxpool1d_backward(g, entry, inp.shape[2])
            continue
        elif layer.kind == BATCHNORM:
            g, gg, gbeta = T.batchnorm_backward(g, entry)
            grads[f"{layer.name}.gamma"] = gg
            grads[f"{layer.name}.beta"] = gbeta
            continue
        elif layer.kind == RELU:
            g = T.relu_backward(inp, g)
            continue
        grads[f"{layer.name}.weight"] = gw
        grads[f"{layer.name}.bias"] = gb
    return grads


def split_heads(output: np.ndarray, split: HeadSplit = HeadSplit()) -> Tuple[np.ndarray, np.ndarray]:
    """Split ``(batch, 1401, T)`` logits into object ``(batch, 1000, T)`` and scene ``(batch, 401, T)``."""
    output = np.asarray(output)
    if output.ndim != 3 or output.shape[1] != split.total:
        raise ShapeError(f"output must have {split.total} channels, got shape {output.shape}")
    obj, scene = split.slices()
    return output[:, obj], output[:, scene]
