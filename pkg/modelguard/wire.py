"""Protocol messages and their byte-exact framing.

A frame is ``length (u32 LE) | body`` where the body is a canonical TLV
sequence (see :mod:`modelguard.tlv`):

    ====  ===================  =========================================
    tag   field                value
    ====  ===================  =========================================
    0x01  protocol version     u8, currently 1
    0x02  message kind         u8, see :class:`MessageKind`
    0x03  session id           8 random bytes
    0x10+ kind-specific        listed on each message class
    ====  ===================  =========================================
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, ClassVar, Dict, List, Optional, Tuple, Type

from pydantic import BaseModel, ConfigDict, Field

from .crypto import random_bytes
from .errors import ProtocolError
from .tlv import TLVDecodeError, decode_tlv, encode_tlv, pack_u32, require, unpack_u32
from .tracing import format_kv

PROTOCOL_VERSION = 1
SESSION_ID_SIZE = 8
FRAME_HEADER = struct.Struct("<I")
MAX_FRAME_BYTES = 64 * 1024 * 1024

_F64 = struct.Struct("<d")


class MessageKind(IntEnum):
    CHALLENGE_REQUEST = 0x01
    CHALLENGE = 0x02
    ATTEST_REPORT = 0x03
    PROVISION_MODEL = 0x04
    MODEL_CURRENT = 0x05
    KEY_REQUEST = 0x06
    KEY_RELEASE = 0x07
    KEY_DENIED = 0x08
    QUERY = 0x09
    RESULT = 0x0A
    ERROR = 0x0B


def new_session_id() -> bytes:
    return random_bytes(SESSION_ID_SIZE)


Fields = List[Tuple[int, bytes]]


class ProtocolMessage(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: ClassVar[MessageKind]
    session_id: bytes = Field(min_length=SESSION_ID_SIZE, max_length=SESSION_ID_SIZE)
    version: int = PROTOCOL_VERSION

    def body_fields(self) -> Fields:
        return []

    @classmethod
    def from_body(cls, session_id: bytes, version: int, fields: Dict[int, bytes]) -> "ProtocolMessage":
        return cls(session_id=session_id, version=version)

    def to_bytes(self) -> bytes:
        header = [
            (0x01, bytes([self.version])),
            (0x02, bytes([int(self.kind)])),
            (0x03, self.session_id),
        ]
        return encode_tlv(header + self.body_fields())


class ChallengeRequest(ProtocolMessage):
    kind: ClassVar[MessageKind] = MessageKind.CHALLENGE_REQUEST


class Challenge(ProtocolMessage):
    """0x10 challenge (16 bytes)."""

    kind: ClassVar[MessageKind] = MessageKind.CHALLENGE
    challenge: bytes

    def body_fields(self) -> Fields:
        return [(0x10, self.challenge)]

    @classmethod
    def from_body(cls, session_id, version, fields):
        return cls(session_id=session_id, version=version, challenge=require(fields, 0x10, 16))


class AttestReport(ProtocolMessage):
    """0x10 encoded :class:`~modelguard.crypto.AttestationReport`.

    0x11 / 0x12 (optional, together): version (u32) and nonce (16) of the
    container already on the device's storage, so V can skip provisioning.
    """

    kind: ClassVar[MessageKind] = MessageKind.ATTEST_REPORT
    report: bytes
    stored_version: Optional[int] = None
    stored_nonce: Optional[bytes] = Field(default=None, min_length=16, max_length=16)

    def body_fields(self) -> Fields:
        fields: Fields = [(0x10, self.report)]
        if self.stored_version is not None and self.stored_nonce is not None:
            fields += [(0x11, pack_u32(self.stored_version)), (0x12, self.stored_nonce)]
        return fields

    @classmethod
    def from_body(cls, session_id, version, fields):
        stored = fields.get(0x11)
        return cls(
            session_id=session_id,
            version=version,
            report=require(fields, 0x10),
            stored_version=unpack_u32(stored) if stored is not None else None,
            stored_nonce=require(fields, 0x12, 16) if stored is not None else None,
        )


class ProvisionModel(ProtocolMessage):
    """0x10 serialized sealed model container."""

    kind: ClassVar[MessageKind] = MessageKind.PROVISION_MODEL
    container: bytes

    def body_fields(self) -> Fields:
        return [(0x10, self.container)]

    @classmethod
    def from_body(cls, session_id, version, fields):
        return cls(session_id=session_id, version=version, container=require(fields, 0x10))


class ModelCurrent(ProtocolMessage):
    """0x10 model version (u32). Sent instead of PROVISION_MODEL when the stored copy is current."""

    kind: ClassVar[MessageKind] = MessageKind.MODEL_CURRENT
    model_version: int

    def body_fields(self) -> Fields:
        return [(0x10, pack_u32(self.model_version))]

    @classmethod
    def from_body(cls, session_id, version, fields):
        return cls(session_id=session_id, version=version, model_version=unpack_u32(require(fields, 0x10)))


class KeyRequest(ProtocolMessage):
    """0x10 enclave pk (32), 0x11 model version of the stored container (u32)."""

    kind: ClassVar[MessageKind] = MessageKind.KEY_REQUEST
    enclave_pk: bytes = Field(min_length=32, max_length=32)
    model_version: int

    def body_fields(self) -> Fields:
        return [(0x10, self.enclave_pk), (0x11, pack_u32(self.model_version))]

    @classmethod
    def from_body(cls, session_id, version, fields):
        return cls(
            session_id=session_id,
            version=version,
            enclave_pk=require(fields, 0x10, 32),
            model_version=unpack_u32(require(fields, 0x11)),
        )


class KeyRelease(ProtocolMessage):
    """0x10 K_U wrapped to the enclave, 0x11 nonce n (16), 0x12 model version (u32)."""

    kind: ClassVar[MessageKind] = MessageKind.KEY_RELEASE
    wrapped_key: bytes
    nonce: bytes = Field(min_length=16, max_length=16)
    model_version: int

    def body_fields(self) -> Fields:
        return [(0x10, self.wrapped_key), (0x11, self.nonce), (0x12, pack_u32(self.model_version))]

    @classmethod
    def from_body(cls, session_id, version, fields):
        return cls(
            session_id=session_id,
            version=version,
            wrapped_key=require(fields, 0x10),
            nonce=require(fields, 0x11, 16),
            model_version=unpack_u32(require(fields, 0x12)),
        )


class KeyDenied(ProtocolMessage):
    """0x10 reason (UTF-8)."""

    kind: ClassVar[MessageKind] = MessageKind.KEY_DENIED
    reason: str

    def body_fields(self) -> Fields:
        return [(0x10, self.reason.encode())]

    @classmethod
    def from_body(cls, session_id, version, fields):
        return cls(session_id=session_id, version=version, reason=require(fields, 0x10).decode())


class Query(ProtocolMessage):
    """0x10 audio reference (UTF-8, optional), 0x11 inline 16-bit PCM clip (optional).

    With neither field set the enclave reads its secure peripheral.
    """

    kind: ClassVar[MessageKind] = MessageKind.QUERY
    audio_ref: Optional[str] = None
    pcm: Optional[bytes] = None

    def body_fields(self) -> Fields:
        fields: Fields = []
        if self.audio_ref is not None:
            fields.append((0x10, self.audio_ref.encode()))
        if self.pcm is not None:
            fields.append((0x11, self.pcm))
        return fields

    @classmethod
    def from_body(cls, session_id, version, fields):
        ref = fields.get(0x10)
        return cls(
            session_id=session_id,
            version=version,
            audio_ref=ref.decode() if ref is not None else None,
            pcm=fields.get(0x11),
        )


class Result(ProtocolMessage):
    """0x10 label (UTF-8), 0x11 score (f64 LE)."""

    kind: ClassVar[MessageKind] = MessageKind.RESULT
    label: str
    score: float

    def body_fields(self) -> Fields:
        return [(0x10, self.label.encode()), (0x11, _F64.pack(self.score))]

    @classmethod
    def from_body(cls, session_id, version, fields):
        return cls(
            session_id=session_id,
            version=version,
            label=require(fields, 0x10).decode(),
            score=_F64.unpack(require(fields, 0x11, _F64.size))[0],
        )


class ErrorMessage(ProtocolMessage):
    """0x10 error code (UTF-8), 0x11 detail (UTF-8)."""

    kind: ClassVar[MessageKind] = MessageKind.ERROR
    code: str
    detail: str = ""

    def body_fields(self) -> Fields:
        return [(0x10, self.code.encode()), (0x11, self.detail.encode())]

    @classmethod
    def from_body(cls, session_id, version, fields):
        return cls(
            session_id=session_id,
            version=version,
            code=require(fields, 0x10).decode(),
            detail=fields.get(0x11, b"").decode(),
        )


MESSAGE_TYPES: Dict[MessageKind, Type[ProtocolMessage]] = {
    cls.kind: cls
    for cls in (
        ChallengeRequest, Challenge, AttestReport, ProvisionModel, ModelCurrent,
        KeyRequest, KeyRelease, KeyDenied, Query, Result, ErrorMessage,
    )
}


def decode_message(body: bytes) -> ProtocolMessage:
    try:
        fields = decode_tlv(body)
        version = require(fields, 0x01, 1)[0]
        kind_code = require(fields, 0x02, 1)[0]
        session_id = require(fields, 0x03, SESSION_ID_SIZE)
        if version != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {version}")
        try:
            cls = MESSAGE_TYPES[MessageKind(kind_code)]
        except ValueError:
            raise ProtocolError(f"unknown message kind {kind_code:#x}") from None
        body_fields = {tag: value for tag, value in fields.items() if tag >= 0x10}
        message = cls.from_body(session_id, version, body_fields)
    except (TLVDecodeError, UnicodeDecodeError, ValueError) as exc:
        raise ProtocolError(f"malformed message: {exc}") from exc
    if message.to_bytes() != bytes(body):
        raise ProtocolError("message encoding is not canonical")
    return message


def encode_frame(message: ProtocolMessage) -> bytes:
    body = message.to_bytes()
    return FRAME_HEADER.pack(len(body)) + body


def decode_frame(frame: bytes) -> ProtocolMessage:
    if len(frame) < FRAME_HEADER.size:
        raise ProtocolError("frame shorter than its length prefix")
    (length,) = FRAME_HEADER.unpack_from(frame, 0)
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {length} bytes exceeds the {MAX_FRAME_BYTES} byte limit")
    if len(frame) - FRAME_HEADER.size != length:
        raise ProtocolError(f"frame declares {length} bytes, carries {len(frame) - FRAME_HEADER.size}")
    return decode_message(frame[FRAME_HEADER.size:])


# ---------------------------------------------------------------------------
# Transcripts
# ---------------------------------------------------------------------------

class Principal(str, Enum):
    VENDOR = "vendor"
    ENCLAVE = "enclave"
    USER = "user"


@dataclass(frozen=True)
class TranscriptEntry:
    seq: int
    timestamp_ms: float
    principal: Principal
    peer: Optional[Principal] = None
    message: Optional[ProtocolMessage] = None
    change: Optional[str] = None

    @property
    def is_message(self) -> bool:
        return self.message is not None

    def to_line(self) -> str:
        if self.message is not None:
            return format_kv(
                "message", seq=self.seq, ts_ms=self.timestamp_ms, src=self.principal, dst=self.peer,
                kind=self.message.kind.name, session=self.message.session_id,
            )
        return format_kv("state", seq=self.seq, ts_ms=self.timestamp_ms, principal=self.principal, change=self.change)


class SessionTranscript:
    """Append-only record of one session: every message and every state change.

    Timestamps come from ``clock`` (milliseconds); the protocol session wires
    it to the enclave's simulated world-switch clock.
    """

    def __init__(self, session_id: bytes, clock: Optional[Callable[[], float]] = None) -> None:
        self.session_id = session_id
        self._clock = clock or (lambda: 0.0)
        self._entries: List[TranscriptEntry] = []
        self._lock = threading.Lock()

    def _append(self, **kwargs) -> TranscriptEntry:
        with self._lock:
            entry = TranscriptEntry(seq=len(self._entries), timestamp_ms=self._clock(), **kwargs)
            self._entries.append(entry)
        return entry

    def record_message(self, sender: Principal, receiver: Principal, message: ProtocolMessage) -> TranscriptEntry:
        return self._append(principal=sender, peer=receiver, message=message)

    def record_state(self, principal: Principal, change: str) -> TranscriptEntry:
        return self._append(principal=principal, change=change)

    @property
    def entries(self) -> Tuple[TranscriptEntry, ...]:
        return tuple(self._entries)

    def messages(self) -> List[ProtocolMessage]:
        return [e.message for e in self._entries if e.message is not None]

    def state_changes(self, principal: Optional[Principal] = None) -> List[str]:
        return [
            e.change for e in self._entries
            if e.change is not None and (principal is None or e.principal == principal)
        ]

    def export_lines(self) -> List[str]:
        return [entry.to_line() for entry in self._entries]

    def __len__(self) -> int:
        return len(self._entries)


def key_release_aad(session_id: bytes, nonce: bytes, model_version: int) -> bytes:
    """Associated data binding a wrapped K_U to its session, nonce and version."""
    return b"OMG-KR" + session_id + nonce + pack_u32(model_version)
