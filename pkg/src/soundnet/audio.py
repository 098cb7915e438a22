"""WAV decoding, preprocessing to 22.05 kHz mono in [-256, 256], and excerpt windowing."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np

TARGET_RATE = 22_050
TARGET_RANGE = 256.0
DEFAULT_OVERLAP = 0.5

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    """Malformed or unsupported RIFF/WAVE data."""


@dataclass
class Waveform:
    """Audio samples, shape ``(n,)`` for mono or ``(n, channels)``.

    ``range`` is the nominal amplitude bound: 1.0 straight out of the decoder,
    256.0 after :func:`preprocess`.
    """

    samples: np.ndarray
    sample_rate: int
    range: float = 1.0

    @property
    def channels(self) -> int:
        return 1 if self.samples.ndim == 1 else self.samples.shape[1]

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def decode_wav(data: bytes) -> Waveform:
    """Decode a RIFF/WAVE byte string holding 16-bit PCM or 32-bit float samples (1 or 2 channels)."""
    if len(data) < 12:
        raise WavError("RIFF header: file shorter than 12 bytes")
    riff, _, wave = struct.unpack("<4sI4s", data[:12])
    if riff != b"RIFF":
        raise WavError(f"RIFF header: chunk id is {riff!r}, expected b'RIFF'")
    if wave != b"WAVE":
        raise WavError(f"RIFF header: form type is {wave!r}, expected b'WAVE'")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            if chunk_id == b"data" and fmt is not None:
                raise WavError(f"data chunk: declares {size} bytes but only {len(body)} present (truncated file)")
            raise WavError(f"{chunk_id.decode('latin-1')!r} chunk: truncated")
        if chunk_id == b"fmt ":
            fmt = _parse_fmt(body)
        elif chunk_id == b"data":
            payload = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavError("fmt chunk: missing")
    if payload is None:
        raise WavError("data chunk: missing")

    tag, channels, rate, bits = fmt
    frame = channels * bits // 8
    if len(payload) % frame:
        raise WavError(f"data chunk: {len(payload)} bytes is not a whole number of {frame}-byte frames")
    if tag == WAVE_FORMAT_PCM:
        samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    else:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        if not np.isfinite(samples).all():
            raise WavError("data chunk: float samples contain NaN or Inf")
    samples = samples.reshape(-1, channels)
    if channels == 1:
        samples = samples[:, 0]
    return Waveform(samples, rate, 1.0)


def _parse_fmt(body: bytes):
    if len(body) < 16:
        raise WavError(f"fmt chunk: {len(body)} bytes, need at least 16")
    tag, channels, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
    if tag == WAVE_FORMAT_EXTENSIBLE:
        if len(body) < 40:
            raise WavError("fmt chunk: extensible format without a sub-format GUID")
        tag = struct.unpack("<H", body[24:26])[0]
    if tag not in (WAVE_FORMAT_PCM, WAVE_FORMAT_IEEE_FLOAT):
        raise WavError(f"fmt chunk: audio format tag {tag:#06x} is not PCM (0x0001) or IEEE float (0x0003)")
    if tag == WAVE_FORMAT_PCM and bits != 16:
        raise WavError(f"fmt chunk: bits per sample is {bits}; only 16-bit PCM is supported")
    if tag == WAVE_FORMAT_IEEE_FLOAT and bits != 32:
        raise WavError(f"fmt chunk: bits per sample is {bits}; only 32-bit float is supported")
    if channels not in (1, 2):
        raise WavError(f"fmt chunk: {channels} channels; only mono and stereo are supported")
    if rate == 0:
        raise WavError("fmt chunk: sample rate is 0")
    return tag, channels, rate, bits


def encode_wav(w: Waveform, float32: bool = False) -> bytes:
    """Encode samples in [-1, 1] as a 16-bit PCM (default) or 32-bit float WAV."""
    samples = np.asarray(w.samples, dtype=np.float64) / w.range
    channels = 1 if samples.ndim == 1 else samples.shape[1]
    if float32:
        payload = samples.astype("<f4").tobytes()
        tag, bits = WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        ints = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
        payload = ints.tobytes()
        tag, bits = WAVE_FORMAT_PCM, 16
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, w.sample_rate, w.sample_rate * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


def read_wav(path: Union[str, Path]) -> Waveform:
    return decode_wav(Path(path).read_bytes())


def write_wav(path: Union[str, Path], w: Waveform, float32: bool = False) -> None:
    Path(path).write_bytes(encode_wav(w, float32))


def resample_linear(samples: np.ndarray, rate: int, target: int) -> np.ndarray:
    """Linear-interpolation resampling of a 1-D signal."""
    if rate == target:
        return samples.copy()
    n_out = max(1, int(round(len(samples) * target / rate)))
    positions = np.arange(n_out) * (rate / target)
    return np.interp(positions, np.arange(len(samples)), samples)


def preprocess(w: Waveform) -> Waveform:
    """Downmix to mono, resample to 22,050 Hz, scale the nominal range to [-256, 256]."""
    samples = np.asarray(w.samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("cannot preprocess an empty waveform")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    samples = resample_linear(samples, w.sample_rate, TARGET_RATE)
    samples = samples * (TARGET_RANGE / w.range)
    return Waveform(samples, TARGET_RATE, TARGET_RANGE)


def extract_windows(w: Waveform, window_seconds: float, overlap: float = DEFAULT_OVERLAP) -> List[np.ndarray]:
    """Split into fixed-length excerpts with the given fractional overlap.

    Windows start every ``window * (1 - overlap)`` samples; if the last one
    stops short of the end, one more window is added flush with the end. A
    clip shorter than one window yields a single right-zero-padded window.
    """
    if window_seconds <= 0:
        raise ValueError(f"window length must be positive, got {window_seconds}")
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    samples = np.asarray(w.samples)
    if samples.ndim != 1:
        raise ValueError("extract_windows expects mono samples; run preprocess first")
    size = int(round(window_seconds * w.sample_rate))
    if size < 1:
        raise ValueError(f"window of {window_seconds} s is shorter than one sample")
    n = len(samples)
    if n <= size:
        out = np.zeros(size, dtype=samples.dtype)
        out[:n] = samples
        return [out]
    hop = max(1, int(np.floor(size * (1 - overlap) + 0.5)))  # half rounds up
    starts = list(range(0, n - size + 1, hop))
    if starts[-1] + size < n:
        starts.append(n - size)
    return [samples[s:s + size].copy() for s in starts]
