import struct

import numpy as np
import pytest

from modelguard.demo import KEYWORDS, MARKER, demo_model, demo_model_bytes, keyword_clip
from modelguard.errors import ModelFormatError, ShapeMismatch
from modelguard.features import FULL_SCALE_MAGNITUDE, Fingerprint, make_fingerprint
from modelguard.inference import (
    FILTER_H,
    FILTER_W,
    FILTERS,
    LABELS,
    TinyConvModel,
    _same_pads,
    classify,
    conv2d,
    feature_shape,
    fully_connected,
    load_model,
    logits,
    relu,
    save_model,
    softmax,
)

FLOAT32_SIZE = 213929
INT8_SIZE = 53617


def random_fingerprint(rng) -> Fingerprint:
    return Fingerprint(rng.integers(0, 256, (49, 43)))


def reference_conv_pixel(x, model, i, j, f):
    """One output value computed straight from the definition."""
    if model.padding == "SAME":
        top, _ = _same_pads(49, FILTER_H, 2)
        left, _ = _same_pads(43, FILTER_W, 2)
    else:
        top = left = 0
    acc = float(model.conv_bias[f])
    for dy in range(FILTER_H):
        for dx in range(FILTER_W):
            r, c = 2 * i + dy - top, 2 * j + dx - left
            if 0 <= r < 49 and 0 <= c < 43:
                acc += x[r, c] * float(model.conv_weights[dy, dx, 0, f])
    return acc


def test_feature_shapes():
    assert feature_shape("SAME") == (25, 22, 8)
    assert feature_shape("VALID") == (21, 17, 8)
    assert TinyConvModel.random(0).fc_in == 4400
    assert TinyConvModel.random(0, padding="VALID").fc_in == 2856


@pytest.mark.parametrize("padding", ["SAME", "VALID"])
def test_conv_matches_loop_reference(padding):
    rng = np.random.default_rng(42)
    model = TinyConvModel.random(1, padding=padding)
    rows, cols, _ = feature_shape(padding)
    fp = random_fingerprint(rng)
    x = fp.dequantize()
    out = conv2d(fp, model)
    for i in range(rows):
        for j in range(cols):
            for f in range(FILTERS):
                assert out[i, j, f] == pytest.approx(reference_conv_pixel(x, model, i, j, f), abs=1e-5)


def test_forward_pass_matches_per_pixel_reference_on_random_cases():
    rng = np.random.default_rng(0)
    for case in range(50):
        model = TinyConvModel.random(case)
        fp = random_fingerprint(rng)
        x = np.pad(fp.dequantize(), ((3, 4), (4, 5)))
        kernel = model.conv_weights[:, :, 0, :].astype(np.float64)
        expected_conv = np.empty((25, 22, 8))
        for i in range(25):
            for j in range(22):
                patch = x[2 * i:2 * i + FILTER_H, 2 * j:2 * j + FILTER_W]
                expected_conv[i, j] = np.tensordot(patch, kernel, axes=([0, 1], [0, 1])) + model.conv_bias
        np.testing.assert_allclose(conv2d(fp, model), expected_conv, rtol=0, atol=1e-5)

        flat = np.maximum(expected_conv, 0).reshape(-1)
        expected_logits = np.array([
            float(np.dot(flat, model.fc_weights[:, k].astype(np.float64))) + float(model.fc_bias[k])
            for k in range(len(LABELS))
        ])
        np.testing.assert_allclose(logits(fp, model), expected_logits, rtol=1e-9, atol=1e-5)


def test_flatten_order_is_row_column_channel():
    model = TinyConvModel(
        conv_weights=np.zeros((8, 10, 1, 8)),
        conv_bias=np.zeros(8),
        fc_weights=np.eye(4400, 12),
        fc_bias=np.zeros(12),
    )
    x = np.zeros((25, 22, 8))
    x[0, 0, 3] = 5.0
    x[0, 1, 1] = 7.0
    out = fully_connected(x.reshape(-1), model)
    assert out[3] == 5.0
    assert out[9] == 7.0


def test_conv_is_linear_before_bias():
    rng = np.random.default_rng(9)
    model = TinyConvModel.random(4)
    a, b = rng.normal(size=(49, 43)), rng.normal(size=(49, 43))
    bias = model.conv_bias.astype(np.float64)
    lhs = conv2d(2.0 * a - 3.0 * b, model) - bias
    rhs = 2.0 * (conv2d(a, model) - bias) - 3.0 * (conv2d(b, model) - bias)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_shape_mismatches():
    model = TinyConvModel.random(0)
    with pytest.raises(ShapeMismatch):
        conv2d(np.zeros((48, 43)), model)
    with pytest.raises(ShapeMismatch):
        fully_connected(np.zeros(4399), model)
    with pytest.raises(ShapeMismatch):
        TinyConvModel(np.zeros((8, 10, 1, 7)), np.zeros(8), np.zeros((4400, 12)), np.zeros(12))


def test_relu():
    assert relu(np.array([-1.0, 0.0, 2.5])).tolist() == [0.0, 0.0, 2.5]


def test_softmax_properties():
    rng = np.random.default_rng(2)
    for _ in range(20):
        z = rng.normal(0, 10, 12)
        p = softmax(z)
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(p > 0)
        np.testing.assert_allclose(softmax(z + 100.0), p, atol=1e-12)
    assert np.isfinite(softmax(np.array([1e4, 0.0]))).all()


def test_ties_resolve_to_the_lowest_index():
    model = TinyConvModel(np.zeros((8, 10, 1, 8)), np.zeros(8), np.zeros((4400, 12)), np.zeros(12))
    label, score = classify(np.zeros((49, 43)), model)
    assert label == "silence"
    assert score == pytest.approx(1 / 12)


def test_classify_returns_softmax_of_the_argmax():
    rng = np.random.default_rng(12)
    model = TinyConvModel.random(3)
    fp = random_fingerprint(rng)
    scores = logits(fp, model)
    result = classify(fp, model)
    assert result.label == LABELS[int(np.argmax(scores))]
    assert result.score == pytest.approx(softmax(scores).max())


def test_weight_file_sizes():
    model = TinyConvModel.random(0)
    assert len(save_model(model, "float32")) == FLOAT32_SIZE
    assert len(save_model(model, "int8")) == INT8_SIZE
    assert len(demo_model_bytes("float32")) == FLOAT32_SIZE


def test_weight_file_header():
    blob = save_model(TinyConvModel.random(0, padding="VALID"), "int8")
    assert blob[:4] == b"TCV1"
    assert blob[4:8] == bytes([1, 1, 1, 0])
    assert struct.unpack_from("<8H", blob, 8) == (49, 43, 8, 10, 1, 8, 2, 2)
    assert struct.unpack_from("<IH", blob, 24) == (2856, 12)


def test_float32_file_reloads_exactly():
    model = TinyConvModel.random(5)
    loaded = load_model(save_model(model))
    for name in ("conv_weights", "conv_bias", "fc_weights", "fc_bias"):
        assert np.array_equal(getattr(loaded, name), getattr(model, name))
    assert loaded.labels == LABELS
    assert loaded.padding == "SAME"


def test_int8_file_is_within_half_a_step():
    model = TinyConvModel.random(6)
    loaded = load_model(save_model(model, "int8"))
    for name in ("conv_weights", "fc_weights"):
        w = getattr(model, name)
        step = np.max(np.abs(w)) / 127.0
        assert np.max(np.abs(getattr(loaded, name) - w)) <= step / 2 + 1e-7
    assert np.array_equal(loaded.fc_bias, model.fc_bias)


def test_marker_survives_both_encodings():
    for encoding in ("float32", "int8"):
        loaded = load_model(demo_model_bytes(encoding))
        assert loaded.fc_bias[-4:].astype("<f4").tobytes() == MARKER
        assert MARKER in demo_model_bytes(encoding)


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XCV1" + b[4:], "magic"),
    (lambda b: b[:4] + b"\x02" + b[5:], "version"),
    (lambda b: b[:6] + b"\x05" + b[7:], "encoding"),
    (lambda b: b[:8] + struct.pack("<H", 48) + b[10:], "dimension"),
    (lambda b: b[:24] + struct.pack("<I", 4000) + b[28:], "fc_in"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\x00", "trailing"),
    (lambda b: b[:20], "header"),
])
def test_load_rejects_malformed_files(mutate, message):
    blob = save_model(TinyConvModel.random(0), "int8")
    with pytest.raises(ModelFormatError, match=message):
        load_model(mutate(blob))


def test_load_rejects_foreign_label_table():
    blob = save_model(TinyConvModel.random(0), "int8")
    renamed = blob.replace(b"\x03yes", b"\x03YES")
    with pytest.raises(ModelFormatError):
        load_model(renamed)


@pytest.mark.parametrize("label", KEYWORDS)
def test_demo_model_recognises_its_keywords(label):
    model = demo_model()
    fp = make_fingerprint(keyword_clip(label))
    assert classify(fp, model).label == label


def test_demo_model_rejection_classes():
    model = demo_model()
    assert classify(make_fingerprint(keyword_clip("silence")), model).label == "silence"
    assert classify(make_fingerprint(keyword_clip("unknown")), model).label == "unknown"


def test_dequantization_scale():
    fp = Fingerprint(np.full((49, 43), 255))
    assert fp.dequantize()[0, 0] == pytest.approx(FULL_SCALE_MAGNITUDE)
