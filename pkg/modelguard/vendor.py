"""Model vendor V: attestation checks, provisioning and license-gated key release."""
from __future__ import annotations

import hmac
import logging
import threading
from dataclasses import dataclass
from datetime import datetime
from collections import OrderedDict
from typing import Callable, Dict, Iterable, List, Optional

from sqlalchemy import select

from .config import get_settings
from .crypto import (
    AttestationReport,
    AttestationVerdict,
    Certificate,
    Measurement,
    RejectReason,
    derive_model_key,
    encrypt_to_enclave,
    random_bytes,
    seal_model,
    verify_attestation,
)
from .database import make_engine, make_session_factory
from .errors import AttestationRejected, ModelGuardError, ProtocolError, UnknownEnclave
from .models import License
from .modelstore import NONCE_SIZE, ContainerMeta, SealedModelContainer
from .wire import (
    SESSION_ID_SIZE,
    AttestReport,
    Challenge,
    ErrorMessage,
    KeyDenied,
    KeyRelease,
    KeyRequest,
    MessageKind,
    ModelCurrent,
    Principal,
    ProtocolMessage,
    ProvisionModel,
    SessionTranscript,
    decode_frame,
    encode_frame,
    key_release_aad,
    new_session_id,
)

logger = logging.getLogger(__name__)

ADMIN_SESSION = bytes(SESSION_ID_SIZE)


@dataclass
class VendorSession:
    session_id: bytes
    transcript: SessionTranscript
    challenge: Optional[bytes] = None
    enclave_pk: Optional[bytes] = None


@dataclass(frozen=True)
class LicenseView:
    enclave_pk: str
    measurement: str
    authorized: bool
    model_version: int
    provisioned_version: int
    updated_at: Optional[datetime] = None

    @classmethod
    def of(cls, row: License) -> "LicenseView":
        return cls(
            enclave_pk=row.enclave_pk,
            measurement=row.measurement,
            authorized=row.authorized,
            model_version=row.model_version,
            provisioned_version=row.provisioned_version,
            updated_at=row.updated_at,
        )


@dataclass(frozen=True)
class Rotation:
    model_version: int
    nonce: bytes
    containers: Dict[str, SealedModelContainer]


class VendorService:
    """State of V: license database, current model and the measurement it trusts.

    ``handle`` is safe to call from several threads; each session keeps its
    own transcript.
    """

    def __init__(
        self,
        model_plaintext: bytes,
        expected_measurement: Measurement,
        trusted_roots: Iterable[Certificate],
        *,
        auto_authorize: Optional[bool] = None,
        db_url: Optional[str] = None,
        model_version: int = 1,
        max_sessions: Optional[int] = None,
    ) -> None:
        settings = get_settings()
        self.expected_measurement = expected_measurement
        self.trusted_roots: List[Certificate] = list(trusted_roots)
        self.auto_authorize = settings.auto_authorize if auto_authorize is None else auto_authorize
        self._model = bytes(model_plaintext)
        self.model_version = model_version
        self.model_nonce = random_bytes(NONCE_SIZE)
        self._db = make_session_factory(make_engine(db_url))
        self.max_sessions = max_sessions or settings.max_vendor_sessions
        self._sessions: "OrderedDict[bytes, VendorSession]" = OrderedDict()
        self._lock = threading.RLock()
        self.admin_transcript = SessionTranscript(ADMIN_SESSION)
        self._handlers: Dict[MessageKind, Callable[[VendorSession, ProtocolMessage], ProtocolMessage]] = {
            MessageKind.CHALLENGE_REQUEST: self._on_challenge_request,
            MessageKind.ATTEST_REPORT: self._on_attest_report,
            MessageKind.KEY_REQUEST: self._on_key_request,
        }

    # -- message dispatch --------------------------------------------------

    def session(self, session_id: bytes) -> VendorSession:
        with self._lock:
            found = self._sessions.get(session_id)
            if found is not None:
                self._sessions.move_to_end(session_id)
                return found
            found = VendorSession(session_id, SessionTranscript(session_id))
            self._sessions[session_id] = found
            while len(self._sessions) > self.max_sessions:
                evicted, _ = self._sessions.popitem(last=False)
                logger.debug(f"Dropping idle session {evicted.hex()}")
            return found

    @property
    def session_count(self) -> int:
        return len(self._sessions)

    def transcript(self, session_id: bytes) -> SessionTranscript:
        """Transcript of a recent session; KeyError once it has been dropped."""
        with self._lock:
            return self._sessions[session_id].transcript

    def handle(self, message: ProtocolMessage) -> ProtocolMessage:
        session = self.session(message.session_id)
        session.transcript.record_message(Principal.ENCLAVE, Principal.VENDOR, message)
        try:
            handler = self._handlers.get(message.kind)
            if handler is None:
                raise ProtocolError(f"vendor does not accept {message.kind.name}")
            reply = handler(session, message)
        except ModelGuardError as exc:
            logger.warning("Session %s: %s (%s)", message.session_id.hex(), exc.code, exc.detail)
            reply = ErrorMessage(session_id=message.session_id, code=exc.code, detail=exc.detail)
        session.transcript.record_message(Principal.VENDOR, Principal.ENCLAVE, reply)
        return reply

    def handle_frame(self, frame: bytes) -> bytes:
        try:
            message = decode_frame(frame)
        except ProtocolError as exc:
            return encode_frame(ErrorMessage(session_id=ADMIN_SESSION, code=exc.code, detail=exc.detail))
        return encode_frame(self.handle(message))

    def _on_challenge_request(self, session: VendorSession, message: ProtocolMessage) -> ProtocolMessage:
        session.challenge = random_bytes(NONCE_SIZE)
        session.transcript.record_state(Principal.VENDOR, "challenge-issued")
        return Challenge(session_id=session.session_id, challenge=session.challenge)

    def _on_attest_report(self, session: VendorSession, message: ProtocolMessage) -> ProtocolMessage:
        assert isinstance(message, AttestReport)
        report = AttestationReport.from_bytes(message.report)
        challenge, session.challenge = session.challenge, None
        if challenge is None or not hmac.compare_digest(report.nonce, challenge):
            session.transcript.record_state(Principal.VENDOR, "attestation-rejected:stale-nonce")
            raise AttestationRejected("report does not answer this session's challenge")
        verdict = self.verify(report)
        if not verdict:
            session.transcript.record_state(Principal.VENDOR, f"attestation-rejected:{verdict.reason.value}")
            raise AttestationRejected(verdict.reason.value)
        if report.enclave_cert.box_pk is None:
            session.transcript.record_state(Principal.VENDOR, "attestation-rejected:no-transport-key")
            raise AttestationRejected("enclave certificate carries no key-transport key")
        session.enclave_pk = report.enclave_pk
        session.transcript.record_state(Principal.VENDOR, "attestation-accepted")

        pk_hex = report.enclave_pk.hex()
        with self._lock, self._db() as db:
            row = db.get(License, pk_hex)
            if row is None:
                row = License(
                    enclave_pk=pk_hex,
                    enclave_cert=report.enclave_cert.to_bytes(),
                    measurement=report.measurement.hex(),
                    authorized=self.auto_authorize,
                    current_nonce=self.model_nonce,
                    model_version=self.model_version,
                    provisioned_version=0,
                )
                db.add(row)
                db.commit()
                session.transcript.record_state(Principal.VENDOR, f"license-registered:authorized={row.authorized}")
                logger.info(f"🔑 Registered enclave {pk_hex[:16]} (authorized={row.authorized})")
            current = (
                message.stored_version == row.model_version == row.provisioned_version
                and message.stored_nonce is not None
                and hmac.compare_digest(message.stored_nonce, row.current_nonce)
            )
            if current:
                return ModelCurrent(session_id=session.session_id, model_version=row.model_version)
            container = self._seal_for(report.enclave_pk, row.current_nonce, row.model_version)
            row.provisioned_version = row.model_version
            db.commit()
            session.transcript.record_state(Principal.VENDOR, f"license-provisioned:v{row.model_version}")
        return ProvisionModel(session_id=session.session_id, container=container.to_bytes())

    def _on_key_request(self, session: VendorSession, message: ProtocolMessage) -> ProtocolMessage:
        assert isinstance(message, KeyRequest)
        if session.enclave_pk is None or not hmac.compare_digest(session.enclave_pk, message.enclave_pk):
            raise AttestationRejected("key requested by an enclave not attested in this session")
        return self.authorize(message.enclave_pk, session_id=session.session_id)

    # -- operations ----------------------------------------------------------

    def verify(self, report: AttestationReport) -> AttestationVerdict:
        issuer_pk = report.enclave_cert.issuer_pk
        for root in self.trusted_roots:
            if hmac.compare_digest(root.subject_pk, issuer_pk):
                return verify_attestation(report, root, self.expected_measurement)
        return AttestationVerdict(False, RejectReason.BAD_CHAIN)

    def _seal_for(self, enclave_pk: bytes, nonce: bytes, model_version: int) -> SealedModelContainer:
        key = derive_model_key(enclave_pk, nonce)
        try:
            return seal_model(key, self._model, ContainerMeta(model_version, nonce))
        finally:
            key.wipe()

    def authorize(self, enclave_pk: bytes, session_id: Optional[bytes] = None) -> ProtocolMessage:
        """KEY_RELEASE with K_U for the license's current nonce, or KEY_DENIED once revoked."""
        session_id = session_id or new_session_id()
        with self._lock, self._db() as db:
            row = db.get(License, enclave_pk.hex())
            if row is None:
                raise UnknownEnclave(f"no license for enclave {enclave_pk.hex()[:16]}")
            if not row.authorized:
                logger.info(f"⛔ Key release denied for {row.enclave_pk[:16]}")
                return KeyDenied(session_id=session_id, reason="license revoked")
            box_pk = Certificate.from_bytes(row.enclave_cert).box_pk
            nonce, version = row.current_nonce, row.model_version
        key = derive_model_key(enclave_pk, nonce)
        try:
            wrapped = encrypt_to_enclave(box_pk, key.key, key_release_aad(session_id, nonce, version))
        finally:
            key.wipe()
        return KeyRelease(session_id=session_id, wrapped_key=wrapped, nonce=nonce, model_version=version)

    def _set_authorized(self, enclave_pk: bytes, authorized: bool) -> LicenseView:
        with self._lock, self._db() as db:
            row = db.get(License, enclave_pk.hex())
            if row is None:
                raise UnknownEnclave(f"no license for enclave {enclave_pk.hex()[:16]}")
            if row.authorized != authorized:
                row.authorized = authorized
                db.commit()
                change = "license-granted" if authorized else "license-revoked"
                self.admin_transcript.record_state(Principal.VENDOR, f"{change}:{row.enclave_pk[:16]}")
            return LicenseView.of(row)

    def revoke(self, enclave_pk: bytes) -> LicenseView:
        logger.info(f"Revoking license {enclave_pk.hex()[:16]}")
        return self._set_authorized(enclave_pk, False)

    def grant(self, enclave_pk: bytes) -> LicenseView:
        logger.info(f"Granting license {enclave_pk.hex()[:16]}")
        return self._set_authorized(enclave_pk, True)

    def rotate_model(self, new_model: bytes) -> Rotation:
        """Publish a new model version under a fresh nonce; stored containers become stale."""
        with self._lock, self._db() as db:
            self._model = bytes(new_model)
            self.model_version += 1
            self.model_nonce = random_bytes(NONCE_SIZE)
            containers: Dict[str, SealedModelContainer] = {}
            for row in db.scalars(select(License)):
                row.current_nonce = self.model_nonce
                row.model_version = self.model_version
                containers[row.enclave_pk] = self._seal_for(bytes.fromhex(row.enclave_pk), self.model_nonce, self.model_version)
            db.commit()
            self.admin_transcript.record_state(Principal.VENDOR, f"model-rotated:v{self.model_version}")
        logger.info(f"🔄 Model rotated to v{self.model_version} ({len(containers)} licenses re-keyed)")
        return Rotation(self.model_version, self.model_nonce, containers)

    def licenses(self) -> List[LicenseView]:
        with self._lock, self._db() as db:
            return [LicenseView.of(row) for row in db.scalars(select(License).order_by(License.created_at))]

    def get_license(self, enclave_pk: bytes) -> Optional[LicenseView]:
        with self._lock, self._db() as db:
            row = db.get(License, enclave_pk.hex())
            return LicenseView.of(row) if row is not None else None
