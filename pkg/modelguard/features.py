"""Audio front end: WAVE ingestion and the 49x43 fingerprint.

Pipeline for one 1 s clip at 16 kHz:

* 49 rectangular windows of 480 samples (30 ms) with a 320-sample (20 ms) shift;
* each window zero-padded to 512 and transformed by a radix-2 FFT in Q15
  fixed point (32-bit products, rounding, 1/2 block scaling per stage, so the
  output is DFT/512);
* magnitudes of 256 bins (the Nyquist bin is dropped unless the frontend is
  configured to drop DC instead);
* 6-bin averaging into 43 values (the last group holds 4 bins);
* linear quantization to uint8, ``FULL_SCALE_MAGNITUDE`` mapping to 255.
"""
from __future__ import annotations

import io
import logging
import wave
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import get_settings
from .errors import MalformedWav, ShapeMismatch, UnsupportedFormat, WrongLength

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000
WINDOW_SAMPLES = 480
WINDOW_SHIFT = 320
FRAME_COUNT = (CLIP_SAMPLES - WINDOW_SAMPLES) // WINDOW_SHIFT + 1  # 49
FFT_SIZE = 512
SPECTRUM_BINS = 256
POOL_WIDTH = 6
POOLED_BINS = -(-SPECTRUM_BINS // POOL_WIDTH)  # 43

# Largest bin magnitude a full-scale input can produce: DC of a constant
# 32768 signal over 480 samples, in DFT/512 units.
FULL_SCALE_MAGNITUDE = 32768.0 * WINDOW_SAMPLES / FFT_SIZE

# Regression bound for |fixed-point magnitude - float DFT magnitude / 512|,
# in Q15 units (about 7.3e-4 of full scale).
MAGNITUDE_ERROR_BOUND = 24.0

DropBin = Literal["nyquist", "dc"]

Q15_MAX = 32767
Q15_MIN = -32768
_ROUND = 1 << 14


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise UnsupportedFormat("audio clips are mono")
        object.__setattr__(self, "samples", samples.astype(np.int16, copy=False))

    @property
    def duration_s(self) -> float:
        return len(self.samples) / float(self.sample_rate)

    def to_pcm_bytes(self) -> bytes:
        return self.samples.astype("<i2").tobytes()

    @classmethod
    def from_pcm_bytes(cls, data: bytes, sample_rate: int = SAMPLE_RATE) -> "AudioClip":
        if len(data) % 2:
            raise MalformedWav("PCM payload has an odd byte count")
        return cls(np.frombuffer(data, dtype="<i2").astype(np.int16), sample_rate)


@dataclass(frozen=True)
class Fingerprint:
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.shape != (FRAME_COUNT, POOLED_BINS):
            raise ShapeMismatch(f"fingerprint must be {FRAME_COUNT}x{POOLED_BINS}, got {values.shape}")
        object.__setattr__(self, "values", values.astype(np.uint8, copy=False))

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * (FULL_SCALE_MAGNITUDE / 255.0)

    def to_bytes(self) -> bytes:
        return self.values.tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> "Fingerprint":
        if len(data) != FRAME_COUNT * POOLED_BINS:
            raise ShapeMismatch(f"fingerprint blob must be {FRAME_COUNT * POOLED_BINS} bytes")
        return cls(np.frombuffer(data, dtype=np.uint8).reshape(FRAME_COUNT, POOLED_BINS))

    def to_csv(self) -> str:
        return "\n".join(",".join(str(int(v)) for v in row) for row in self.values) + "\n"


# ---------------------------------------------------------------------------
# WAVE I/O
# ---------------------------------------------------------------------------

def read_wav(data: bytes) -> AudioClip:
    """Parse a RIFF/WAVE file holding 16-bit mono PCM."""
    try:
        with wave.open(io.BytesIO(data), "rb") as wav:
            channels = wav.getnchannels()
            width = wav.getsampwidth()
            rate = wav.getframerate()
            declared = wav.getnframes()
            if channels != 1:
                raise UnsupportedFormat(f"expected mono audio, got {channels} channels")
            if width != 2:
                raise UnsupportedFormat(f"expected 16-bit samples, got {8 * width}-bit")
            if wav.getcomptype() != "NONE":
                raise UnsupportedFormat(f"compressed audio ({wav.getcomptype()}) is not supported")
            frames = wav.readframes(declared)
    except wave.Error as exc:
        if "unknown format" in str(exc):
            raise UnsupportedFormat(f"unsupported WAVE encoding: {exc}") from exc
        raise MalformedWav(f"malformed WAVE header: {exc}") from exc
    except EOFError as exc:
        raise MalformedWav("WAVE file ends inside its header") from exc
    if len(frames) != declared * 2:
        raise MalformedWav(f"header declares {declared} samples, file holds {len(frames) // 2}")
    return AudioClip(np.frombuffer(frames, dtype="<i2").astype(np.int16), rate)


def write_wav(clip: AudioClip) -> bytes:
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(clip.sample_rate)
        wav.writeframes(clip.to_pcm_bytes())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------

def frame(clip: AudioClip) -> np.ndarray:
    """Return the (49, 480) matrix of analysis windows."""
    if clip.sample_rate != SAMPLE_RATE or len(clip.samples) != CLIP_SAMPLES:
        raise WrongLength(
            f"expected {CLIP_SAMPLES} samples at {SAMPLE_RATE} Hz, "
            f"got {len(clip.samples)} at {clip.sample_rate} Hz"
        )
    return sliding_window_view(clip.samples, WINDOW_SAMPLES)[::WINDOW_SHIFT]


# ---------------------------------------------------------------------------
# Q15 fixed-point FFT
# ---------------------------------------------------------------------------

def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _stage_plan(n: int):
    stages = []
    m = 2
    while m <= n:
        half = m // 2
        starts = np.arange(0, n, m)
        j = np.arange(half)
        top = (starts[:, None] + j[None, :]).ravel()
        stages.append((top, top + half, np.tile(j * (n // m), len(starts))))
        m *= 2
    return stages


def _twiddles(n: int):
    k = np.arange(n // 2)
    angle = 2.0 * np.pi * k / n
    wr = np.clip(np.rint(np.cos(angle) * 32768.0), Q15_MIN, Q15_MAX).astype(np.int64)
    wi = np.clip(np.rint(-np.sin(angle) * 32768.0), Q15_MIN, Q15_MAX).astype(np.int64)
    return wr, wi


_BITREV = _bit_reverse(FFT_SIZE)
_STAGES = _stage_plan(FFT_SIZE)
_TW_RE, _TW_IM = _twiddles(FFT_SIZE)


def _sat(x: np.ndarray) -> np.ndarray:
    return np.clip(x, Q15_MIN, Q15_MAX)


def fft_q15(windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched 512-point Q15 FFT; rows are windows of at most 512 samples.

    Returns integer (re, im) arrays scaled by 1/512 relative to the DFT.
    """
    windows = np.atleast_2d(np.asarray(windows))
    if windows.shape[-1] > FFT_SIZE:
        raise ShapeMismatch(f"window longer than {FFT_SIZE} samples")
    x = np.zeros((windows.shape[0], FFT_SIZE), dtype=np.int64)
    x[:, : windows.shape[-1]] = windows
    re = x[:, _BITREV]
    im = np.zeros_like(re)
    for top, bottom, tw in _STAGES:
        wr, wi = _TW_RE[tw], _TW_IM[tw]
        br, bi = re[:, bottom], im[:, bottom]
        tr = (wr * br - wi * bi + _ROUND) >> 15
        ti = (wr * bi + wi * br + _ROUND) >> 15
        ar, ai = re[:, top], im[:, top]
        re[:, top] = _sat((ar + tr + 1) >> 1)
        im[:, top] = _sat((ai + ti + 1) >> 1)
        re[:, bottom] = _sat((ar - tr + 1) >> 1)
        im[:, bottom] = _sat((ai - ti + 1) >> 1)
    return re, im


def _resolve_drop_bin(drop_bin: Optional[DropBin]) -> DropBin:
    return drop_bin or get_settings().drop_bin


def spectrum_batch(windows: np.ndarray, drop_bin: Optional[DropBin] = None) -> np.ndarray:
    windows = np.atleast_2d(np.asarray(windows))
    if windows.shape[-1] != WINDOW_SAMPLES:
        raise ShapeMismatch(f"windows must hold {WINDOW_SAMPLES} samples, got {windows.shape[-1]}")
    re, im = fft_q15(windows)
    mags = np.rint(np.sqrt(re * re + im * im)).astype(np.int32)
    if _resolve_drop_bin(drop_bin) == "dc":
        return mags[:, 1:SPECTRUM_BINS + 1]
    return mags[:, :SPECTRUM_BINS]


def spectrum(window: np.ndarray, drop_bin: Optional[DropBin] = None) -> np.ndarray:
    """256 magnitude bins of one 480-sample window."""
    window = np.asarray(window)
    if window.shape != (WINDOW_SAMPLES,):
        raise ShapeMismatch(f"window must hold {WINDOW_SAMPLES} samples, got {window.shape}")
    return spectrum_batch(window[None, :], drop_bin)[0]


# ---------------------------------------------------------------------------
# Pooling and quantization
# ---------------------------------------------------------------------------

_POOL_STARTS = np.arange(0, SPECTRUM_BINS, POOL_WIDTH)
_POOL_SIZES = np.diff(np.append(_POOL_STARTS, SPECTRUM_BINS)).astype(np.float64)


def pool_bins(bins: np.ndarray) -> np.ndarray:
    """Average groups of 6 neighbouring bins; works on the last axis."""
    bins = np.asarray(bins, dtype=np.float64)
    if bins.shape[-1] != SPECTRUM_BINS:
        raise ShapeMismatch(f"expected {SPECTRUM_BINS} bins, got {bins.shape[-1]}")
    return np.add.reduceat(bins, _POOL_STARTS, axis=-1) / _POOL_SIZES


def quantize(pooled: np.ndarray) -> np.ndarray:
    scaled = np.rint(np.asarray(pooled, dtype=np.float64) * (255.0 / FULL_SCALE_MAGNITUDE))
    return np.clip(scaled, 0, 255).astype(np.uint8)


def make_fingerprint(clip: AudioClip, drop_bin: Optional[DropBin] = None) -> Fingerprint:
    windows = frame(clip)
    pooled = pool_bins(spectrum_batch(windows, drop_bin))
    return Fingerprint(quantize(pooled))
