"""WAV decoding, resampling and overlapping-window framing.

Frames are cut from the raw waveform without padding: a recording of
``d`` seconds yields ``floor((d - window) / stride) + 1`` frames and any
tail shorter than a stride is dropped. Per-frame peak normalization is
applied when frames are stacked for the network (:func:`normalize_frames`),
so persisted frames stay exact slices of their source.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CANONICAL_RATE_HZ = 44100
DEFAULT_WINDOW_S = 5.0
DEFAULT_STRIDE_S = 1.0
NORM_EPS = 1e-8

_PCM = 0x0001
_IEEE_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    pass


class TruncatedWavError(WavError):
    pass


class FrameWarning(UserWarning):
    """A recording was too short to produce a single frame."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass
class AudioFrame:
    samples: np.ndarray
    subject_id: str
    label: str
    source_offset_s: float
    source: str = ""


@dataclass
class _WavHeader:
    fmt: int
    channels: int
    rate: int
    bits: int
    data_offset: int
    data_size: int  # bytes actually present, rounded down to whole frames
    declared_size: int


def _read_header(buf: bytes, name="") -> _WavHeader:
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise WavError(f"{name}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    while pos + 8 <= len(buf):
        cid, size = struct.unpack_from("<4sI", buf, pos)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + 16 > len(buf):
                raise TruncatedWavError(f"{name}: truncated fmt chunk")
            tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", buf, body)
            if tag == _EXTENSIBLE:
                if size < 40:
                    raise WavError(f"{name}: short WAVE_FORMAT_EXTENSIBLE header")
                tag = struct.unpack_from("<H", buf, body + 24)[0]
            fmt = (tag, channels, rate, bits, block_align)
        elif cid == b"data":
            if fmt is None:
                raise WavError(f"{name}: data chunk precedes fmt chunk")
            tag, channels, rate, bits, block_align = fmt
            if tag == _PCM and bits not in (8, 16, 24, 32):
                raise WavError(f"{name}: unsupported PCM bit depth {bits}")
            if tag == _IEEE_FLOAT and bits not in (32, 64):
                raise WavError(f"{name}: unsupported float bit depth {bits}")
            if tag not in (_PCM, _IEEE_FLOAT):
                raise WavError(f"{name}: unsupported encoding tag {tag:#06x}")
            if channels not in (1, 2):
                raise WavError(f"{name}: {channels} channels; only mono and stereo are supported")
            if rate <= 0:
                raise WavError(f"{name}: invalid sample rate {rate}")
            frame_bytes = channels * bits // 8
            available = len(buf) - body
            return _WavHeader(
                fmt=tag,
                channels=channels,
                rate=rate,
                bits=bits,
                data_offset=body,
                data_size=min(size, available) // frame_bytes * frame_bytes,
                declared_size=size,
            )
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavError(f"{name}: no fmt chunk")
    raise TruncatedWavError(f"{name}: no data chunk")


def _header_of(path) -> _WavHeader:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4096)
    total = path.stat().st_size
    try:
        h = _read_header(head, str(path))
    except WavError:
        if total <= len(head):
            raise
        h = _read_header(path.read_bytes(), str(path))
    # the 4 KiB peek only sees the start of the data chunk
    frame_bytes = h.channels * h.bits // 8
    present = total - h.data_offset
    h.data_size = min(h.declared_size, present) // frame_bytes * frame_bytes
    return h


def wav_info(path) -> tuple[int, int]:
    """(sample_rate_hz, n_frames) from the header, checking for truncation."""
    h = _header_of(path)
    if h.data_size < h.declared_size - (h.declared_size % (h.channels * h.bits // 8)):
        raise TruncatedWavError(
            f"{path}: data chunk declares {h.declared_size} bytes, {h.data_size} present"
        )
    return h.rate, h.data_size // (h.channels * h.bits // 8)


def wav_duration(path) -> float:
    rate, n = wav_info(path)
    return n / rate


def decode_wav(path) -> Waveform:
    """Decode PCM 8/16/24/32-bit or float WAV into a mono float64 waveform in [-1, 1]."""
    buf = Path(path).read_bytes()
    h = _read_header(buf, str(path))
    frame_bytes = h.channels * h.bits // 8
    expected = h.declared_size // frame_bytes * frame_bytes
    if h.data_size < expected:
        raise TruncatedWavError(f"{path}: data chunk declares {h.declared_size} bytes, {h.data_size} present")
    raw = buf[h.data_offset : h.data_offset + h.data_size]
    if not raw:
        raise WavError(f"{path}: zero samples")

    if h.fmt == _IEEE_FLOAT:
        x = np.frombuffer(raw, dtype="<f4" if h.bits == 32 else "<f8").astype(np.float64)
        x = np.clip(np.nan_to_num(x, nan=0.0), -1.0, 1.0)
    elif h.bits == 8:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif h.bits == 16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif h.bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v & 0x800000, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    else:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)

    if h.channels == 2:
        x = x.reshape(-1, 2).mean(axis=1)
    return Waveform(x, h.rate)


def write_wav(path, samples, sample_rate_hz: int, bits: int = 16, float_format: bool = False):
    """Write mono (1-D) or multichannel (n, channels) samples in [-1, 1]."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if float_format:
        bits = 32
        data = np.asarray(x, dtype="<f4").tobytes()
        tag = _IEEE_FLOAT
    else:
        tag = _PCM
        x = np.clip(x, -1.0, 1.0)
        if bits == 8:
            data = np.clip(np.round(x * 128.0 + 128.0), 0, 255).astype(np.uint8).tobytes()
        elif bits == 16:
            data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        elif bits == 24:
            v = np.clip(np.round(x * (1 << 23)), -(1 << 23), (1 << 23) - 1).astype(np.int64).ravel()
            v &= 0xFFFFFF
            data = np.stack([v & 0xFF, (v >> 8) & 0xFF, (v >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
        elif bits == 32:
            data = np.clip(np.round(x * (1 << 31)), -(1 << 31), (1 << 31) - 1).astype("<i4").tobytes()
        else:
            raise ValueError(f"unsupported bit depth {bits}")
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate_hz, sample_rate_hz * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(data)) + data
    if len(data) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def resample(w: Waveform, target_hz: int) -> Waveform:
    """Linear-interpolation resampling; output length is ``round(n * target / source)``."""
    if target_hz <= 0:
        raise ValueError("target rate must be positive")
    if target_hz == w.sample_rate_hz:
        return Waveform(w.samples.copy(), w.sample_rate_hz)
    n = w.samples.size
    n_out = max(int(round(n * target_hz / w.sample_rate_hz)), 1)
    pos = np.arange(n_out) * (w.sample_rate_hz / target_hz)
    out = np.interp(pos, np.arange(n), w.samples)
    return Waveform(out, target_hz)


def frame_count(duration_s: float, window_s: float, stride_s: float) -> int:
    if stride_s <= 0 or window_s <= 0:
        raise ValueError("window and stride must be positive")
    if window_s > duration_s + 1e-9:
        warnings.warn(
            f"window of {window_s} s exceeds recording of {duration_s} s; no frames", FrameWarning, stacklevel=2
        )
        return 0
    return int(math.floor((duration_s - window_s) / stride_s + 1e-9)) + 1


def frame_geometry(window_s: float, stride_s: float, rate_hz: int) -> tuple[int, int]:
    """Window and stride in samples."""
    return int(round(window_s * rate_hz)), int(round(stride_s * rate_hz))


def extract_frames(w: Waveform, meta, window_s=DEFAULT_WINDOW_S, stride_s=DEFAULT_STRIDE_S) -> list[AudioFrame]:
    """Cut ``w`` into overlapping windows labelled with ``meta``'s subject and diagnosis.

    Frame ``i`` covers samples ``[i*S, i*S + L)`` with ``L``/``S`` the window
    and stride in samples. Frames are views of ``w.samples``.
    """
    win, hop = frame_geometry(window_s, stride_s, w.sample_rate_hz)
    if hop <= 0 or win <= 0:
        raise ValueError("window and stride must span at least one sample")
    n = w.samples.size
    if win > n:
        warnings.warn(
            f"{meta.subject_id}: recording of {n / w.sample_rate_hz:g} s is shorter than the "
            f"{window_s:g} s window; no frames",
            FrameWarning,
            stacklevel=2,
        )
        return []
    count = (n - win) // hop + 1
    source = str(getattr(meta, "audio_path", ""))
    return [
        AudioFrame(
            samples=w.samples[i * hop : i * hop + win],
            subject_id=meta.subject_id,
            label=meta.diagnosis,
            source_offset_s=i * hop / w.sample_rate_hz,
            source=source,
        )
        for i in range(count)
    ]


def normalize_frames(x: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Scale each row (or the whole 1-D frame) to unit peak amplitude."""
    x = np.asarray(x)
    peak = np.max(np.abs(x), axis=-1, keepdims=True)
    return x / np.maximum(peak, eps)


def load_recording(meta, rate_hz: int = CANONICAL_RATE_HZ) -> Waveform:
    w = decode_wav(meta.audio_path)
    return resample(w, rate_hz) if w.sample_rate_hz != rate_hz else w


TENSOR_MAGIC = b"LNGT"
TENSOR_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}


def write_tensor(path, arr: np.ndarray):
    """Flat binary tensor: magic, version, dtype code, ndim, pad, uint64 dims, row-major data."""
    arr = np.ascontiguousarray(arr)
    code = next((c for c, dt in _DTYPE_CODES.items() if dt == arr.dtype.newbyteorder("<")), None)
    if code is None:
        raise ValueError(f"unsupported tensor dtype {arr.dtype}")
    head = TENSOR_MAGIC + struct.pack("<BBBB", TENSOR_VERSION, code, arr.ndim, 0)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as f:
        f.write(head)
        f.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad tensor magic")
    version, code, ndim, _ = struct.unpack_from("<BBBB", buf, 4)
    if version != TENSOR_VERSION:
        raise ValueError(f"{path}: tensor format version {version}, expected {TENSOR_VERSION}")
    if code not in _DTYPE_CODES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 8)
    start = 8 + 8 * ndim
    dt = _DTYPE_CODES[code]
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) - start != n * dt.itemsize:
        raise ValueError(f"{path}: expected {n * dt.itemsize} data bytes, found {len(buf) - start}")
    return np.frombuffer(buf, dtype=dt, offset=start).reshape(shape).copy()


@dataclass
class FrameSet:
    """Stacked frames plus per-frame provenance, the unit passed between pipeline stages."""

    samples: np.ndarray  # (n_frames, frame_len)
    subject_ids: list
    labels: list
    offsets_s: list
    sources: list
    sample_rate_hz: int
    window_s: float = DEFAULT_WINDOW_S
    stride_s: float = DEFAULT_STRIDE_S

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_frames(cls, frames, sample_rate_hz, window_s=DEFAULT_WINDOW_S, stride_s=DEFAULT_STRIDE_S, dtype=np.float32):
        frames = list(frames)
        if frames:
            samples = np.stack([np.asarray(f.samples, dtype=dtype) for f in frames])
        else:
            samples = np.zeros((0, int(round(window_s * sample_rate_hz))), dtype=dtype)
        return cls(
            samples=samples,
            subject_ids=[f.subject_id for f in frames],
            labels=[f.label for f in frames],
            offsets_s=[float(f.source_offset_s) for f in frames],
            sources=[f.source for f in frames],
            sample_rate_hz=sample_rate_hz,
            window_s=window_s,
            stride_s=stride_s,
        )

    def frames(self) -> list[AudioFrame]:
        return [
            AudioFrame(self.samples[i], self.subject_ids[i], self.labels[i], self.offsets_s[i], self.sources[i])
            for i in range(len(self))
        ]

    def subset(self, idx) -> "FrameSet":
        idx = list(idx)
        return FrameSet(
            samples=self.samples[idx],
            subject_ids=[self.subject_ids[i] for i in idx],
            labels=[self.labels[i] for i in idx],
            offsets_s=[self.offsets_s[i] for i in idx],
            sources=[self.sources[i] for i in idx],
            sample_rate_hz=self.sample_rate_hz,
            window_s=self.window_s,
            stride_s=self.stride_s,
        )

    def save(self, stem):
        """Write ``<stem>.bin`` (tensor) and ``<stem>.json`` (provenance)."""
        stem = Path(stem)
        write_tensor(stem.with_suffix(".bin"), self.samples)
        meta = {
            "sample_rate_hz": self.sample_rate_hz,
            "window_s": self.window_s,
            "stride_s": self.stride_s,
            "count": len(self),
            "subject_ids": list(self.subject_ids),
            "labels": list(self.labels),
            "offsets_s": list(self.offsets_s),
            "sources": list(self.sources),
        }
        stem.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, stem) -> "FrameSet":
        stem = Path(stem)
        if stem.suffix in (".bin", ".json"):
            stem = stem.with_suffix("")
        meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
        samples = read_tensor(stem.with_suffix(".bin"))
        if samples.ndim != 2 or samples.shape[0] != meta["count"]:
            raise ValueError(f"{stem}: tensor shape {samples.shape} does not match {meta['count']} frames")
        return cls(
            samples=samples,
            subject_ids=meta["subject_ids"],
            labels=meta["labels"],
            offsets_s=meta["offsets_s"],
            sources=meta["sources"],
            sample_rate_hz=meta["sample_rate_hz"],
            window_s=meta["window_s"],
            stride_s=meta["stride_s"],
        )


def frame_recordings(recordings, rate_hz=CANONICAL_RATE_HZ, window_s=DEFAULT_WINDOW_S, stride_s=DEFAULT_STRIDE_S, dtype=np.float32) -> FrameSet:
    """Decode, resample and frame each recording, in manifest order."""
    frames = []
    for meta in recordings:
        frames.extend(extract_frames(load_recording(meta, rate_hz), meta, window_s, stride_s))
    return FrameSet.from_frames(frames, rate_hz, window_s, stride_s, dtype=dtype)
