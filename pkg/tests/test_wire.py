import pytest

from modelguard.errors import ProtocolError
from modelguard.tlv import TLVDecodeError, decode_tlv, encode_tlv
from modelguard.tracing import parse_kv
from modelguard.wire import (
    AttestReport,
    Challenge,
    ChallengeRequest,
    ErrorMessage,
    KeyDenied,
    KeyRelease,
    KeyRequest,
    MessageKind,
    ModelCurrent,
    Principal,
    ProvisionModel,
    Query,
    Result,
    SessionTranscript,
    decode_frame,
    encode_frame,
    key_release_aad,
)

SID = bytes(range(8))


def test_tlv_requires_ascending_tags():
    with pytest.raises(ValueError):
        encode_tlv([(2, b"a"), (1, b"b")])
    with pytest.raises(ValueError):
        encode_tlv([(1, b"a"), (1, b"b")])


def test_tlv_decoder_rejects_reordered_and_truncated_input():
    good = encode_tlv([(1, b"a"), (2, b"bc")])
    assert decode_tlv(good) == {1: b"a", 2: b"bc"}
    swapped = good[7:] + good[:7]
    with pytest.raises(TLVDecodeError):
        decode_tlv(swapped)
    with pytest.raises(TLVDecodeError):
        decode_tlv(good[:-1])
    with pytest.raises(TLVDecodeError):
        decode_tlv(good + b"\x03")


def test_challenge_request_frame_is_byte_exact():
    frame = encode_frame(ChallengeRequest(session_id=SID))
    assert frame.hex() == (
        "1c000000"
        "0100" "01000000" "01"
        "0200" "01000000" "01"
        "0300" "08000000" "0001020304050607"
    )


def test_result_frame_encodes_score_as_f64():
    frame = encode_frame(Result(session_id=SID, label="yes", score=0.5))
    assert frame.endswith(bytes.fromhex("1100" "08000000" "000000000000e03f"))
    assert decode_frame(frame) == Result(session_id=SID, label="yes", score=0.5)


MESSAGES = [
    ChallengeRequest(session_id=SID),
    Challenge(session_id=SID, challenge=bytes(16)),
    AttestReport(session_id=SID, report=b"report"),
    AttestReport(session_id=SID, report=b"report", stored_version=4, stored_nonce=bytes(range(16))),
    ProvisionModel(session_id=SID, container=b"\x00" * 100),
    ModelCurrent(session_id=SID, model_version=2),
    KeyRequest(session_id=SID, enclave_pk=bytes(32), model_version=1),
    KeyRelease(session_id=SID, wrapped_key=b"w" * 92, nonce=bytes(16), model_version=1),
    KeyDenied(session_id=SID, reason="license revoked"),
    Query(session_id=SID, audio_ref="peripheral:microphone"),
    Query(session_id=SID, pcm=b"\x01\x00" * 4),
    Result(session_id=SID, label="go", score=0.25),
    ErrorMessage(session_id=SID, code="wrong-phase", detail="query in phase NEW"),
]


def test_every_message_kind_is_covered():
    assert {m.kind for m in MESSAGES} == set(MessageKind)


@pytest.mark.parametrize("message", MESSAGES, ids=lambda m: m.kind.name)
def test_decode_inverts_encode(message):
    assert decode_frame(encode_frame(message)) == message


def test_frame_length_prefix_must_match():
    frame = encode_frame(ChallengeRequest(session_id=SID))
    with pytest.raises(ProtocolError):
        decode_frame(frame + b"\x00")
    with pytest.raises(ProtocolError):
        decode_frame(frame[:3])


def _frame_from_fields(fields):
    body = encode_tlv(fields)
    return len(body).to_bytes(4, "little") + body


def test_unknown_kind_and_version_are_rejected():
    with pytest.raises(ProtocolError, match="kind"):
        decode_frame(_frame_from_fields([(1, b"\x01"), (2, b"\x7f"), (3, SID)]))
    with pytest.raises(ProtocolError, match="version"):
        decode_frame(_frame_from_fields([(1, b"\x02"), (2, b"\x01"), (3, SID)]))


def test_missing_body_field_is_rejected():
    with pytest.raises(ProtocolError):
        decode_frame(_frame_from_fields([(1, b"\x01"), (2, bytes([MessageKind.CHALLENGE])), (3, SID)]))


def test_unexpected_field_breaks_canonical_form():
    frame = _frame_from_fields([(1, b"\x01"), (2, bytes([MessageKind.CHALLENGE_REQUEST])), (3, SID), (0x10, b"x")])
    with pytest.raises(ProtocolError, match="canonical"):
        decode_frame(frame)


def test_transcript_is_ordered_and_exportable():
    clock = iter([0.0, 0.3, 0.6])
    transcript = SessionTranscript(SID, clock=lambda: next(clock))
    transcript.record_message(Principal.ENCLAVE, Principal.VENDOR, ChallengeRequest(session_id=SID))
    transcript.record_state(Principal.VENDOR, "challenge-issued")
    transcript.record_message(Principal.VENDOR, Principal.ENCLAVE, Challenge(session_id=SID, challenge=bytes(16)))

    assert [e.seq for e in transcript.entries] == [0, 1, 2]
    assert transcript.state_changes(Principal.VENDOR) == ["challenge-issued"]
    assert [m.kind for m in transcript.messages()] == [MessageKind.CHALLENGE_REQUEST, MessageKind.CHALLENGE]

    lines = [parse_kv(line) for line in transcript.export_lines()]
    assert lines[0]["event"] == "message"
    assert lines[0]["kind"] == "CHALLENGE_REQUEST"
    assert lines[0]["session"] == SID.hex()
    assert lines[1] == {"event": "state", "seq": "1", "ts_ms": "0.300", "principal": "vendor", "change": "challenge-issued"}
    assert lines[2]["src"] == "vendor" and lines[2]["dst"] == "enclave"


def test_key_release_aad_binds_session_nonce_and_version():
    base = key_release_aad(SID, bytes(16), 1)
    assert base != key_release_aad(bytes(8), bytes(16), 1)
    assert base != key_release_aad(SID, bytes([1]) * 16, 1)
    assert base != key_release_aad(SID, bytes(16), 2)
