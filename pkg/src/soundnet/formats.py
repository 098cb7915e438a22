"""Binary and text file formats: checkpoints, teacher posteriors, feature dumps, manifests.

All binary formats are little-endian, carry a 4-byte magic and a u32 version,
and end with a CRC-32 of every preceding byte. Strings are UTF-8 prefixed by
their u32 byte length. Writes go to a temporary file that is renamed into
place, so an interrupted write never replaces a good file with a partial one.
"""
from __future__ import annotations

import csv
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .network import BUILTINS, NetworkConfig, Parameters, param_shapes

PathLike = Union[str, os.PathLike]

CHECKPOINT_MAGIC = b"SNDC"
CHECKPOINT_VERSION = 1
POSTERIOR_MAGIC = b"SNTP"
POSTERIOR_VERSION = 1
FEATURES_MAGIC = b"SNFD"
FEATURES_VERSION = 1

META_PREFIX = "meta/"


class FormatError(ValueError):
    """A file does not follow its declared format."""


class BadMagicError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class PosteriorError(FormatError):
    """A teacher distribution block is not a valid probability vector."""


# --------------------------------------------------------------------------
# low-level helpers
# --------------------------------------------------------------------------

def atomic_write(path: PathLike, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Writer:
    def __init__(self):
        self.parts: List[bytes] = []

    def u32(self, v: int):
        self.parts.append(struct.pack("<I", v))

    def string(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.parts.append(b)

    def floats(self, arr: np.ndarray):
        self.parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def finish(self) -> bytes:
        body = b"".join(self.parts)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int, field_name: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"{self.what}: truncated while reading {field_name}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, field_name: str) -> int:
        return struct.unpack("<I", self.take(4, field_name))[0]

    def string(self, field_name: str) -> str:
        n = self.u32(f"{field_name} length")
        try:
            return self.take(n, field_name).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.what}: {field_name} is not valid UTF-8") from exc

    def floats(self, count: int, field_name: str) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, field_name), dtype="<f4").astype(np.float32)

    def done(self) -> bool:
        return self.pos == len(self.data)


def _open(data: bytes, magic: bytes, version: int, what: str) -> _Reader:
    if len(data) < 12:
        raise TruncatedError(f"{what}: file too short ({len(data)} bytes)")
    if data[:4] != magic:
        raise BadMagicError(f"{what}: bad magic {data[:4]!r}, expected {magic!r}")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{what}: CRC-32 mismatch (file is corrupt)")
    r = _Reader(body, what)
    r.pos = 4
    got = r.u32("version")
    if got != version:
        raise UnsupportedVersionError(f"{what}: unsupported version {got} (this build reads {version})")
    return r


def _split_u32(v: int) -> np.ndarray:
    # two 16-bit halves are exact in float32
    if not 0 <= v < 2 ** 32:
        raise ValueError(f"value {v} does not fit in 32 bits")
    return np.array([v >> 16, v & 0xFFFF], dtype=np.float32)


def _join_u32(a: np.ndarray) -> int:
    return (int(a[0]) << 16) | int(a[1])


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Named float32 parameter blocks plus training metadata.

    Metadata is stored as ordinary blocks under ``meta/``: ``iteration`` and
    ``seed`` as two float32 words holding the high and low 16 bits, ``loss`` as a
    single float32.
    """

    network_id: str
    blocks: Dict[str, np.ndarray]
    iteration: int = 0
    seed: int = 0
    loss: float = float("nan")
    version: int = CHECKPOINT_VERSION

    def parameter_count(self) -> int:
        """Number of learned values (excludes running statistics and metadata)."""
        return int(sum(v.size for k, v in self.blocks.items() if ".running_" not in k))

    def to_bytes(self) -> bytes:
        w = _Writer()
        w.parts.append(CHECKPOINT_MAGIC)
        w.u32(self.version)
        w.string(self.network_id)
        meta = {
            f"{META_PREFIX}iteration": _split_u32(self.iteration),
            f"{META_PREFIX}seed": _split_u32(self.seed),
            f"{META_PREFIX}loss": np.array([self.loss], dtype=np.float32),
        }
        blocks = list(self.blocks.items()) + list(meta.items())
        w.u32(len(blocks))
        for name, arr in blocks:
            arr = np.asarray(arr)
            w.string(name)
            w.u32(arr.ndim)
            for d in arr.shape:
                w.u32(d)
            w.floats(arr)
        return w.finish()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        r = _open(data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")
        network_id = r.string("network id")
        n = r.u32("layer count")
        blocks: Dict[str, np.ndarray] = {}
        for _ in range(n):
            name = r.string("block name")
            rank = r.u32(f"{name} rank")
            dims = tuple(r.u32(f"{name} dim") for _ in range(rank))
            blocks[name] = r.floats(math.prod(dims), f"{name} values").reshape(dims)
        if not r.done():
            raise FormatError("checkpoint: trailing bytes after the last block")
        try:
            iteration = _join_u32(blocks.pop(f"{META_PREFIX}iteration"))
            seed = _join_u32(blocks.pop(f"{META_PREFIX}seed"))
            loss = float(blocks.pop(f"{META_PREFIX}loss")[0])
        except KeyError as exc:
            raise FormatError(f"checkpoint: missing metadata block {exc}") from exc
        return cls(network_id, blocks, iteration, seed, loss)

    @classmethod
    def from_params(cls, config: NetworkConfig, params: Parameters, iteration: int = 0, loss: float = float("nan")) -> "Checkpoint":
        blocks = {}
        for key in param_shapes(config):
            blocks[key] = params.arrays[key].astype(np.float32)
            if key.endswith(".beta"):
                layer = key[: -len(".beta")]
                for stat in ("running_mean", "running_var"):
                    if f"{layer}.{stat}" in params.stats:
                        blocks[f"{layer}.{stat}"] = params.stats[f"{layer}.{stat}"].astype(np.float32)
        seed = params.seed if params.seed is not None else 0
        return cls(network_id(config), blocks, iteration, seed, loss)

    def to_params(self) -> Tuple[NetworkConfig, Parameters]:
        config = config_from_id(self.network_id)
        shapes = param_shapes(config)
        arrays, stats = {}, {}
        for key, arr in self.blocks.items():
            if ".running_" in key:
                stats[key] = arr
            elif key in shapes:
                if arr.shape != shapes[key]:
                    raise FormatError(f"checkpoint: block {key} has shape {arr.shape}, {config.name} expects {shapes[key]}")
                arrays[key] = arr
            else:
                raise FormatError(f"checkpoint: unexpected block {key} for {config.name}")
        missing = set(shapes) - set(arrays)
        if missing:
            raise FormatError(f"checkpoint: missing blocks {sorted(missing)}")
        return config, Parameters(arrays, stats, self.seed)


def network_id(config: NetworkConfig) -> str:
    builder = BUILTINS.get(config.name)
    if builder is not None and builder() == config:
        return config.name
    return "custom:" + config.describe()


def config_from_id(ident: str) -> NetworkConfig:
    if ident in BUILTINS:
        return BUILTINS[ident]()
    if ident.startswith("custom:"):
        return NetworkConfig.from_description(ident[len("custom:"):])
    raise FormatError(f"checkpoint: unknown network id {ident!r}")


def save_checkpoint(path: PathLike, ckpt: Checkpoint) -> None:
    atomic_write(path, ckpt.to_bytes())


def load_checkpoint(path: PathLike) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# teacher posteriors
# --------------------------------------------------------------------------

@dataclass
class TeacherPosterior:
    clip_id: str
    probs: np.ndarray  # (timesteps, objects + scenes)


def validate_posterior(probs: np.ndarray, objects: int = 1000, scenes: int = 401, tol: float = 1e-3, where: str = "posterior") -> None:
    probs = np.asarray(probs)
    if probs.ndim != 2 or probs.shape[1] != objects + scenes:
        raise PosteriorError(f"{where}: expected (T, {objects + scenes}) probabilities, got shape {probs.shape}")
    if not np.isfinite(probs).all() or (probs < 0).any():
        raise PosteriorError(f"{where}: probabilities must be finite and non-negative")
    for head, block in (("object", probs[:, :objects]), ("scene", probs[:, objects:])):
        err = np.abs(block.astype(np.float64).sum(axis=1) - 1.0)
        if err.size and err.max() > tol:
            t = int(err.argmax())
            raise PosteriorError(f"{where}: {head} block at timestep {t} sums to {1 + err[t]:.6f} or {1 - err[t]:.6f}; deviation exceeds {tol}")


def write_posteriors(path: PathLike, clips: Sequence[TeacherPosterior], objects: int = 1000, scenes: int = 401) -> None:
    w = _Writer()
    w.parts.append(POSTERIOR_MAGIC)
    w.u32(POSTERIOR_VERSION)
    w.u32(objects)
    w.u32(scenes)
    w.u32(len(clips))
    for clip in clips:
        validate_posterior(clip.probs, objects, scenes, where=f"clip {clip.clip_id}")
        w.string(clip.clip_id)
        w.u32(clip.probs.shape[0])
        w.floats(clip.probs)
    atomic_write(path, w.finish())


def read_posteriors(path: PathLike) -> List[TeacherPosterior]:
    r = _open(Path(path).read_bytes(), POSTERIOR_MAGIC, POSTERIOR_VERSION, f"posterior file {path}")
    objects = r.u32("object count")
    scenes = r.u32("scene count")
    n = r.u32("clip count")
    clips = []
    for _ in range(n):
        clip_id = r.string("clip id")
        steps = r.u32("timestep count")
        probs = r.floats(steps * (objects + scenes), "probabilities").reshape(steps, objects + scenes)
        validate_posterior(probs, objects, scenes, where=f"{path}: clip {clip_id}")
        clips.append(TeacherPosterior(clip_id, probs))
    if not r.done():
        raise FormatError(f"posterior file {path}: trailing bytes")
    return clips


# --------------------------------------------------------------------------
# feature dumps
# --------------------------------------------------------------------------

@dataclass
class FeatureDump:
    layer: str
    dim: int
    ids: List[str] = field(default_factory=list)
    vectors: List[np.ndarray] = field(default_factory=list)

    def add(self, record_id: str, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float32).ravel()
        if values.size != self.dim:
            raise ValueError(f"record {record_id}: dimension {values.size}, dump holds {self.dim}")
        self.ids.append(record_id)
        self.vectors.append(values)

    def matrix(self) -> np.ndarray:
        return np.stack(self.vectors) if self.vectors else np.zeros((0, self.dim), np.float32)

    def to_bytes(self) -> bytes:
        w = _Writer()
        w.parts.append(FEATURES_MAGIC)
        w.u32(FEATURES_VERSION)
        w.string(self.layer)
        w.u32(self.dim)
        w.u32(len(self.ids))
        for rid, vec in zip(self.ids, self.vectors):
            w.string(rid)
            w.floats(vec)
        return w.finish()

    @classmethod
    def from_bytes(cls, data: bytes, what: str = "feature dump") -> "FeatureDump":
        r = _open(data, FEATURES_MAGIC, FEATURES_VERSION, what)
        layer = r.string("layer name")
        dim = r.u32("dimension")
        dump = cls(layer, dim)
        for _ in range(r.u32("record count")):
            rid = r.string("record id")
            dump.ids.append(rid)
            dump.vectors.append(r.floats(dim, f"record {rid}"))
        if not r.done():
            raise FormatError(f"{what}: trailing bytes")
        return dump


def save_features(path: PathLike, dump: FeatureDump) -> None:
    atomic_write(path, dump.to_bytes())


def load_features(path: PathLike) -> FeatureDump:
    return FeatureDump.from_bytes(Path(path).read_bytes(), f"feature dump {path}")


def recording_id(record_id: str) -> str:
    """Window record ids are ``<recording>#<window index>``."""
    return record_id.rsplit("#", 1)[0]


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

DISTILL = "distill"
LABELED = "labeled"
_MANIFEST_HEADERS = {
    (
        "audio_path",
        "teacher_posterior_path",
    ): DISTILL,
    ("audio_path", "label"): LABELED,
}


@dataclass
class Manifest:
    """CSV manifest; the header row decides the mode.

    ``audio_path,teacher_posterior_path`` declares a distillation manifest and
    ``audio_path,label`` a labeled one. Relative paths resolve against the
    manifest's directory.
    """

    mode: str
    rows: List[Tuple[Path, Union[Path, str]]]
    path: Optional[Path] = None

    def __iter__(self) -> Iterator[Tuple[Path, Union[Path, str]]]:
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)


def load_manifest(path: PathLike, check_paths: bool = True) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    with path.open(newline="") as fh:
        reader = csv.reader(row for row in fh if row.strip() and not row.lstrip().startswith("#"))
        try:
            header = tuple(c.strip() for c in next(reader))
        except StopIteration:
            raise FormatError(f"manifest {path}: empty file") from None
        mode = _MANIFEST_HEADERS.get(header)
        if mode is None:
            raise FormatError(f"manifest {path}: header {','.join(header)!r} is neither 'audio_path,teacher_posterior_path' nor 'audio_path,label'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise FormatError(f"manifest {path}: row {lineno} has {len(row)} fields, expected 2")
            audio = base / row[0].strip()
            if check_paths and not audio.exists():
                raise FileNotFoundError(f"manifest {path}: row {lineno}: missing audio file {audio}")
            if mode == DISTILL:
                second: Union[Path, str] = base / row[1].strip()
                if check_paths and not Path(second).exists():
                    raise FileNotFoundError(f"manifest {path}: row {lineno}: missing posterior file {second}")
            else:
                second = row[1].strip()
            rows.append((audio, second))
    return Manifest(mode, rows, path)


def write_manifest(path: PathLike, mode: str, rows: Sequence[Tuple[str, str]]) -> None:
    header = next(h for h, m in _MANIFEST_HEADERS.items() if m == mode)
    lines = [",".join(header)] + [f"{a},{b}" for a, b in rows]
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
