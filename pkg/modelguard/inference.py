"""tiny_conv forward pass and the TCV1 weight file.

Network: conv 8x10, 8 filters, stride 2 (SAME padding by default) -> ReLU ->
flatten in (row, column, channel) order -> dense layer over 12 labels.

Conv weights use the HWIO layout ``(filter_h, filter_w, in_channels, filters)``;
dense weights are ``(fc_in, labels)``. Argmax ties resolve to the lowest index.

TCV1 layout (little-endian)::

    0   4  magic "TCV1"
    4   1  format version (1)
    5   1  padding (0 SAME, 1 VALID)
    6   1  weight encoding (0 float32, 1 int8 + per-tensor float32 scale)
    7   1  reserved
    8   2  input rows (49)        10  2  input cols (43)
    12  2  filter h (8)           14  2  filter w (10)
    16  2  in channels (1)        18  2  filters (8)
    20  2  stride h (2)           22  2  stride w (2)
    24  4  fc_in (4400)           28  2  labels (12)     30  2 reserved
    32     conv weights, conv bias, fc weights, fc bias, then the label
           table as (u8 length, UTF-8 bytes) pairs

Biases are always float32; with int8 encoding each weight tensor is
preceded by its float32 scale.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ModelFormatError, ShapeMismatch
from .features import FRAME_COUNT, POOLED_BINS, Fingerprint

LABELS: Tuple[str, ...] = (
    "silence", "unknown", "yes", "no", "up", "down",
    "left", "right", "on", "off", "stop", "go",
)
FILTER_H = 8
FILTER_W = 10
FILTERS = 8
STRIDE = (2, 2)
MAGIC = b"TCV1"
FORMAT_VERSION = 1

Padding = Literal["SAME", "VALID"]
WeightEncoding = Literal["float32", "int8"]

_HEADER = struct.Struct("<4sBBBBHHHHHHHHIHH")
_PADDING_CODES = {"SAME": 0, "VALID": 1}
_ENCODING_CODES = {"float32": 0, "int8": 1}


def _out_size(size: int, k: int, s: int, padding: Padding) -> int:
    if padding == "SAME":
        return -(-size // s)
    return (size - k) // s + 1


def feature_shape(padding: Padding = "SAME") -> Tuple[int, int, int]:
    return (
        _out_size(FRAME_COUNT, FILTER_H, STRIDE[0], padding),
        _out_size(POOLED_BINS, FILTER_W, STRIDE[1], padding),
        FILTERS,
    )


@dataclass(frozen=True, eq=False)
class TinyConvModel:
    conv_weights: np.ndarray
    conv_bias: np.ndarray
    fc_weights: np.ndarray
    fc_bias: np.ndarray
    labels: Tuple[str, ...] = LABELS
    padding: Padding = "SAME"

    def __post_init__(self) -> None:
        if self.padding not in _PADDING_CODES:
            raise ModelFormatError(f"unknown padding {self.padding!r}")
        if tuple(self.labels) != LABELS:
            raise ModelFormatError("label table must be the canonical 12-class order")
        fc_in = int(np.prod(feature_shape(self.padding)))
        expected = {
            "conv_weights": (FILTER_H, FILTER_W, 1, FILTERS),
            "conv_bias": (FILTERS,),
            "fc_weights": (fc_in, len(LABELS)),
            "fc_bias": (len(LABELS),),
        }
        for name, shape in expected.items():
            arr = np.array(getattr(self, name), dtype=np.float32)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name} must have shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def fc_in(self) -> int:
        return self.fc_weights.shape[0]

    @classmethod
    def random(cls, seed: int = 0, padding: Padding = "SAME", scale: float = 0.05) -> "TinyConvModel":
        rng = np.random.default_rng(seed)
        fc_in = int(np.prod(feature_shape(padding)))
        return cls(
            conv_weights=rng.normal(0.0, scale, (FILTER_H, FILTER_W, 1, FILTERS)),
            conv_bias=rng.normal(0.0, scale, FILTERS),
            fc_weights=rng.normal(0.0, scale, (fc_in, len(LABELS))),
            fc_bias=rng.normal(0.0, scale, len(LABELS)),
            padding=padding,
        )


class Classification(NamedTuple):
    label: str
    score: float


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _same_pads(size: int, k: int, s: int) -> Tuple[int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def _as_input(fp: Union[Fingerprint, np.ndarray]) -> np.ndarray:
    x = fp.dequantize() if isinstance(fp, Fingerprint) else np.asarray(fp, dtype=np.float64)
    if x.shape != (FRAME_COUNT, POOLED_BINS):
        raise ShapeMismatch(f"conv input must be {FRAME_COUNT}x{POOLED_BINS}, got {x.shape}")
    return x


def conv2d(fp: Union[Fingerprint, np.ndarray], model: TinyConvModel) -> np.ndarray:
    x = _as_input(fp)
    if model.padding == "SAME":
        x = np.pad(x, (_same_pads(FRAME_COUNT, FILTER_H, STRIDE[0]), _same_pads(POOLED_BINS, FILTER_W, STRIDE[1])))
    patches = sliding_window_view(x, (FILTER_H, FILTER_W))[:: STRIDE[0], :: STRIDE[1]]
    kernel = model.conv_weights[:, :, 0, :].astype(np.float64)
    out = np.einsum("ijhw,hwo->ijo", patches, kernel) + model.conv_bias.astype(np.float64)
    if out.shape != feature_shape(model.padding):
        raise ShapeMismatch(f"conv output {out.shape} != {feature_shape(model.padding)}")
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def fully_connected(x: np.ndarray, model: TinyConvModel) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.fc_in,):
        raise ShapeMismatch(f"dense input must have {model.fc_in} values, got {x.shape}")
    return x @ model.fc_weights.astype(np.float64) + model.fc_bias.astype(np.float64)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def logits(fp: Union[Fingerprint, np.ndarray], model: TinyConvModel) -> np.ndarray:
    return fully_connected(relu(conv2d(fp, model)).reshape(-1), model)


def classify(fp: Union[Fingerprint, np.ndarray], model: TinyConvModel) -> Classification:
    scores = logits(fp, model)
    idx = int(np.argmax(scores))
    return Classification(model.labels[idx], float(softmax(scores)[idx]))


# ---------------------------------------------------------------------------
# TCV1 weight files
# ---------------------------------------------------------------------------

def _quantize_int8(w: np.ndarray) -> Tuple[np.float32, np.ndarray]:
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = np.float32(peak / 127.0 if peak > 0 else 1.0)
    q = np.clip(np.rint(w / scale), -127, 127).astype(np.int8)
    return scale, q


def save_model(model: TinyConvModel, weight_encoding: WeightEncoding = "float32") -> bytes:
    if weight_encoding not in _ENCODING_CODES:
        raise ModelFormatError(f"unknown weight encoding {weight_encoding!r}")
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, _PADDING_CODES[model.padding], _ENCODING_CODES[weight_encoding], 0,
        FRAME_COUNT, POOLED_BINS, FILTER_H, FILTER_W, 1, FILTERS, STRIDE[0], STRIDE[1],
        model.fc_in, len(model.labels), 0,
    )
    parts = [header]

    def weights(w: np.ndarray) -> None:
        if weight_encoding == "int8":
            scale, q = _quantize_int8(w)
            parts.append(struct.pack("<f", scale))
            parts.append(q.tobytes(order="C"))
        else:
            parts.append(w.astype("<f4").tobytes(order="C"))

    weights(model.conv_weights)
    parts.append(model.conv_bias.astype("<f4").tobytes())
    weights(model.fc_weights)
    parts.append(model.fc_bias.astype("<f4").tobytes())
    for label in model.labels:
        raw = label.encode("utf-8")
        parts.append(struct.pack("<B", len(raw)) + raw)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, offset: int) -> None:
        self.data = data
        self.offset = offset

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise ModelFormatError(
                f"payload truncated: need {size} bytes at offset {self.offset}, file has {len(self.data)}"
            )
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def load_model(data: bytes) -> TinyConvModel:
    if len(data) < _HEADER.size:
        raise ModelFormatError("file shorter than the TCV1 header")
    (magic, version, padding_code, encoding_code, _, rows, cols, fh, fw, ic, nf,
     sh, sw, fc_in, n_labels, _) = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported TCV1 version {version}")
    padding: Optional[Padding] = next((p for p, c in _PADDING_CODES.items() if c == padding_code), None)
    encoding = next((e for e, c in _ENCODING_CODES.items() if c == encoding_code), None)
    if padding is None or encoding is None:
        raise ModelFormatError("unknown padding or weight encoding code")
    if (rows, cols, fh, fw, ic, nf, sh, sw, n_labels) != (
        FRAME_COUNT, POOLED_BINS, FILTER_H, FILTER_W, 1, FILTERS, STRIDE[0], STRIDE[1], len(LABELS)
    ):
        raise ModelFormatError("dimension header does not describe a tiny_conv network")
    if fc_in != int(np.prod(feature_shape(padding))):
        raise ModelFormatError(f"fc_in {fc_in} inconsistent with {padding} padding")

    reader = _Reader(bytes(data), _HEADER.size)

    def weights(count: int) -> np.ndarray:
        if encoding == "int8":
            (scale,) = struct.unpack("<f", reader.take(4))
            q = np.frombuffer(reader.take(count), dtype=np.int8)
            return (q.astype(np.float32) * np.float32(scale)).astype(np.float32)
        return reader.floats(count)

    conv_w = weights(fh * fw * ic * nf).reshape(fh, fw, ic, nf)
    conv_b = reader.floats(nf)
    fc_w = weights(fc_in * n_labels).reshape(fc_in, n_labels)
    fc_b = reader.floats(n_labels)
    labels = []
    for _ in range(n_labels):
        (length,) = struct.unpack("<B", reader.take(1))
        try:
            labels.append(reader.take(length).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise ModelFormatError("label table is not UTF-8") from exc
    if reader.offset != len(data):
        raise ModelFormatError(f"{len(data) - reader.offset} trailing bytes after label table")
    return TinyConvModel(conv_w, conv_b, fc_w, fc_b, tuple(labels), padding)
