"""Deterministic stand-ins for the trained keyword model and its test set.

Each keyword is a pure tone centred on one pooled spectrum column, and the
hand-wired :func:`demo_model` reads those columns back out, so the whole
pipeline can be exercised end to end without external data.
:class:`LocalDeployment` wires a vendor and a device together in-process.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .crypto import PlatformIdentity, generate_platform_identity, measure
from .enclave import EnclaveHost, SimulatedPeripheral
from .features import (
    CLIP_SAMPLES,
    FFT_SIZE,
    FULL_SCALE_MAGNITUDE,
    POOL_WIDTH,
    SAMPLE_RATE,
    AudioClip,
    write_wav,
)
from .inference import FILTER_H, FILTER_W, FILTERS, LABELS, TinyConvModel, WeightEncoding, feature_shape, save_model
from .modelstore import ModelStore
from .protocol import ProtocolSession, UserClient, open_session
from .transport import LoopbackVendorChannel
from .vendor import VendorService

logger = logging.getLogger(__name__)

KEYWORDS: Tuple[str, ...] = LABELS[2:]
TONE_COLUMNS: Dict[str, int] = {label: 2 + 2 * i for i, label in enumerate(KEYWORDS)}

# Every 4th byte is '<' so the float32 reading of the marker is a small positive bias.
MARKER = b"OMG<MDL<PLN<TXT<"

DEFAULT_CODE_IMAGE = b"OMG-SA\x00modelguard keyword-spotting enclave v1\x00" + bytes(range(256)) * 16

_SILENCE_BIAS = 1.0


def tone_frequency(label: str) -> float:
    """Centre frequency of the pooled column that carries ``label``."""
    column = TONE_COLUMNS[label]
    return (POOL_WIDTH * column + POOL_WIDTH // 2) * SAMPLE_RATE / FFT_SIZE


def keyword_clip(
    label: str,
    *,
    amplitude: float = 12000.0,
    phase: float = 0.0,
    noise: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> AudioClip:
    rng = rng or np.random.default_rng(0)
    t = np.arange(CLIP_SAMPLES) / SAMPLE_RATE
    if label == "silence":
        signal = np.zeros(CLIP_SAMPLES)
    elif label == "unknown":
        signal = rng.normal(0.0, 8000.0, CLIP_SAMPLES)
    else:
        signal = amplitude * np.sin(2 * np.pi * tone_frequency(label) * t + phase)
    if noise:
        signal = signal + rng.normal(0.0, noise, CLIP_SAMPLES)
    return AudioClip(np.clip(np.rint(signal), -32768, 32767).astype(np.int16))


def demo_model(with_marker: bool = True) -> TinyConvModel:
    """SAME-padded tiny_conv whose logits are pooled-column energies.

    Filter 0 copies the even input columns, filter 1 the odd ones. A keyword
    logit is the mean of its column minus the mean odd-column energy;
    ``unknown`` scores broadband (odd-column) energy and ``silence`` wins
    when nothing else fires.
    """
    rows, cols, channels = feature_shape("SAME")
    conv_w = np.zeros((FILTER_H, FILTER_W, 1, FILTERS), dtype=np.float32)
    pad_top = (FILTER_H - 1) // 2
    pad_left = (FILTER_W - 1) // 2
    conv_w[pad_top, pad_left, 0, 0] = 1.0
    conv_w[pad_top, pad_left + 1, 0, 1] = 1.0

    scale = FULL_SCALE_MAGNITUDE / 255.0
    fc = np.zeros((rows, cols, channels, len(LABELS)), dtype=np.float64)
    odd_mean = 1.0 / (rows * cols * scale)
    fc[:, :, 1, LABELS.index("unknown")] = odd_mean
    for label, column in TONE_COLUMNS.items():
        idx = LABELS.index(label)
        fc[:, column // 2, 0, idx] = 1.0 / (rows * scale)
        fc[:, :, 1, idx] -= odd_mean

    fc_bias = np.zeros(len(LABELS), dtype=np.float32)
    fc_bias[LABELS.index("silence")] = _SILENCE_BIAS
    if with_marker:
        fc_bias[-4:] = np.frombuffer(MARKER, dtype="<f4")
    return TinyConvModel(
        conv_weights=conv_w,
        conv_bias=np.zeros(FILTERS, dtype=np.float32),
        fc_weights=fc.reshape(rows * cols * channels, len(LABELS)),
        fc_bias=fc_bias,
    )


def demo_model_bytes(weight_encoding: WeightEncoding = "float32") -> bytes:
    return save_model(demo_model(), weight_encoding)


def demo_test_set(per_class: int = 10, seed: int = 0) -> List[Tuple[str, AudioClip]]:
    """``per_class`` clips for every keyword, with random level, phase and background noise."""
    rng = np.random.default_rng(seed)
    clips = []
    for label in KEYWORDS:
        for _ in range(per_class):
            clips.append((label, keyword_clip(
                label,
                amplitude=float(rng.uniform(6000.0, 14000.0)),
                phase=float(rng.uniform(0.0, 2 * np.pi)),
                noise=300.0,
                rng=rng,
            )))
    return clips


def write_test_set(directory: Path, per_class: int = 10, seed: int = 0) -> List[Path]:
    """Write ``<directory>/<label>/<label>_NN.wav``; the layout bench uses for accuracy."""
    written = []
    counters: Dict[str, int] = {}
    for label, clip in demo_test_set(per_class, seed):
        n = counters.get(label, 0)
        counters[label] = n + 1
        path = Path(directory) / label / f"{label}_{n:02d}.wav"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(write_wav(clip))
        written.append(path)
    return written


@dataclass
class LocalDeployment:
    """One device (platform, host, storage) and one vendor wired through a loopback channel."""

    platform: PlatformIdentity
    vendor: VendorService
    host: EnclaveHost
    store: ModelStore
    channel: LoopbackVendorChannel
    user: UserClient
    code: bytes

    @classmethod
    def create(
        cls,
        storage_dir: Path,
        *,
        model: Optional[bytes] = None,
        code: bytes = DEFAULT_CODE_IMAGE,
        platform: Optional[PlatformIdentity] = None,
        auto_authorize: Optional[bool] = None,
    ) -> "LocalDeployment":
        platform = platform or generate_platform_identity()
        expected = measure(code)
        vendor = VendorService(
            model if model is not None else demo_model_bytes(),
            expected,
            [platform.platform_cert],
            auto_authorize=auto_authorize,
        )
        return cls(
            platform=platform,
            vendor=vendor,
            host=EnclaveHost(platform),
            store=ModelStore(storage_dir),
            channel=LoopbackVendorChannel(vendor),
            user=UserClient(platform.platform_cert, expected),
            code=code,
        )

    def open(self, code: Optional[bytes] = None, peripheral: Optional[SimulatedPeripheral] = None) -> ProtocolSession:
        return open_session(self.host, code if code is not None else self.code, self.channel, self.store, self.user, peripheral=peripheral)

    def ready_session(self, peripheral: Optional[SimulatedPeripheral] = None) -> ProtocolSession:
        """Open a session and run preparation and initialization."""
        session = self.open(peripheral=peripheral)
        session.run_preparation()
        session.run_initialization()
        return session
