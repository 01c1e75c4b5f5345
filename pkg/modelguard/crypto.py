"""Key hierarchy, measurement, attestation and sealing primitives.

Primitive choices: SHA-256 for measurements, Ed25519 for certificates and
attestation reports, HKDF-SHA256 for every derivation, AES-256-GCM for
sealing, and X25519 + HKDF + AES-GCM to wrap K_U for one attested enclave.

Certificate TLV layout (tags, ascending)::

    0x01 scheme        b"ed25519"
    0x02 role          b"platform" | b"enclave"
    0x03 issuer        issuer name (UTF-8)
    0x04 subject_pk    32 bytes
    0x05 issuer_pk     32 bytes
    0x06 measurement   32 bytes (enclave certificates only)
    0x07 box_pk        32 bytes X25519 key-transport key (enclave only)
    0x0F signature     64 bytes over the encoding of tags 0x01-0x07

Attestation report TLV layout::

    0x01 measurement | 0x02 enclave_pk | 0x03 nonce (16)
    0x04 signature over (measurement || enclave_pk || nonce)
    0x05 enclave certificate
"""
from __future__ import annotations

import hashlib
import hmac
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ed25519, x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import CertificateError, EntropyError, MalformedKeyError, UnsealError
from .modelstore import IV_SIZE, NONCE_SIZE, TAG_SIZE, ContainerMeta, SealedModelContainer
from .tlv import TLVDecodeError, decode_tlv, encode_tlv, require

logger = logging.getLogger(__name__)

SCHEME_ED25519 = b"ed25519"
MODEL_KEY_INFO = b"OMG-model-key-v1"
KEY_RELEASE_INFO = b"OMG-key-release-v1"
KEY_SIZE = 32
DIGEST_SIZE = 32
SIGNATURE_SIZE = 64


def _hkdf(ikm: bytes, *, salt: Optional[bytes], info: bytes, length: int = KEY_SIZE) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(ikm)


def random_bytes(size: int) -> bytes:
    try:
        return os.urandom(size)
    except (NotImplementedError, OSError) as exc:
        raise EntropyError(f"system entropy source unavailable: {exc}") from exc


# ---------------------------------------------------------------------------
# Measurement
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Measurement:
    digest: bytes

    def __post_init__(self) -> None:
        if len(self.digest) != DIGEST_SIZE:
            raise ValueError("measurement digest must be 32 bytes")

    def hex(self) -> str:
        return self.digest.hex()


def measure(code_blob: bytes) -> Measurement:
    return Measurement(hashlib.sha256(bytes(code_blob)).digest())


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    role: str
    issuer: str
    subject_pk: bytes
    issuer_pk: bytes
    signature: bytes
    measurement: Optional[bytes] = None
    box_pk: Optional[bytes] = None
    scheme: bytes = SCHEME_ED25519

    def tbs_bytes(self) -> bytes:
        fields = [
            (0x01, self.scheme),
            (0x02, self.role.encode()),
            (0x03, self.issuer.encode()),
            (0x04, self.subject_pk),
            (0x05, self.issuer_pk),
        ]
        if self.measurement is not None:
            fields.append((0x06, self.measurement))
        if self.box_pk is not None:
            fields.append((0x07, self.box_pk))
        return encode_tlv(fields)

    def to_bytes(self) -> bytes:
        return self.tbs_bytes() + encode_tlv([(0x0F, self.signature)])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        try:
            fields = decode_tlv(data)
            cert = cls(
                scheme=require(fields, 0x01),
                role=require(fields, 0x02).decode(),
                issuer=require(fields, 0x03).decode(),
                subject_pk=require(fields, 0x04, 32),
                issuer_pk=require(fields, 0x05, 32),
                measurement=fields.get(0x06),
                box_pk=fields.get(0x07),
                signature=require(fields, 0x0F, SIGNATURE_SIZE),
            )
        except (TLVDecodeError, UnicodeDecodeError) as exc:
            raise CertificateError(f"malformed certificate: {exc}") from exc
        if cert.to_bytes() != bytes(data):
            raise CertificateError("certificate encoding is not canonical")
        return cert

    def verify(self, issuer_pk: bytes) -> bool:
        if self.scheme != SCHEME_ED25519 or not hmac.compare_digest(self.issuer_pk, issuer_pk):
            return False
        try:
            ed25519.Ed25519PublicKey.from_public_bytes(issuer_pk).verify(self.signature, self.tbs_bytes())
        except (InvalidSignature, ValueError):
            return False
        return True


def _issue(signer: ed25519.Ed25519PrivateKey, issuer: str, **subject) -> Certificate:
    issuer_pk = signer.public_key().public_bytes_raw()
    unsigned = Certificate(issuer=issuer, issuer_pk=issuer_pk, signature=b"", **subject)
    signature = signer.sign(unsigned.tbs_bytes())
    return Certificate(issuer=issuer, issuer_pk=issuer_pk, signature=signature, **subject)


# ---------------------------------------------------------------------------
# Platform and enclave identities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlatformIdentity:
    platform_cert: Certificate
    platform_signing_key: ed25519.Ed25519PrivateKey = field(repr=False)

    @property
    def public_key(self) -> bytes:
        return self.platform_cert.subject_pk


def generate_platform_identity(rng_seed: Optional[bytes] = None, *, issuer: str = "device-vendor") -> PlatformIdentity:
    """Create the device's root identity; a fixed ``rng_seed`` makes it reproducible."""
    seed = rng_seed if rng_seed is not None else random_bytes(32)
    secret = bytearray(_hkdf(bytes(seed), salt=None, info=b"OMG-platform-v1"))
    try:
        key = ed25519.Ed25519PrivateKey.from_private_bytes(bytes(secret))
    finally:
        secret[:] = bytes(len(secret))
    pk = key.public_key().public_bytes_raw()
    cert = _issue(key, issuer, role="platform", subject_pk=pk)
    return PlatformIdentity(platform_cert=cert, platform_signing_key=key)


class EnclaveKeyPair:
    """PK/SK for one measured enclave plus its key-transport key.

    The secret halves have no serialization path; ``destroy`` drops them.
    """

    def __init__(
        self,
        sk: ed25519.Ed25519PrivateKey,
        box_sk: x25519.X25519PrivateKey,
        cert: Certificate,
    ) -> None:
        self._sk: Optional[ed25519.Ed25519PrivateKey] = sk
        self._box_sk: Optional[x25519.X25519PrivateKey] = box_sk
        self.pk = sk.public_key().public_bytes_raw()
        self.box_pk = box_sk.public_key().public_bytes_raw()
        self.cert = cert

    def __repr__(self) -> str:
        return f"EnclaveKeyPair(pk={self.pk.hex()[:16]}...)"

    def _require(self):
        if self._sk is None or self._box_sk is None:
            raise MalformedKeyError("enclave key pair has been destroyed")
        return self._sk, self._box_sk

    def sign(self, payload: bytes) -> bytes:
        sk, _ = self._require()
        return sk.sign(payload)

    def open_key_release(self, blob: bytes, aad: bytes) -> bytes:
        """Unwrap a secret sealed with :func:`encrypt_to_enclave` for this enclave."""
        _, box_sk = self._require()
        if len(blob) < 32 + IV_SIZE + TAG_SIZE:
            raise UnsealError("wrapped key too short")
        eph_pk, iv, body = blob[:32], blob[32:32 + IV_SIZE], blob[32 + IV_SIZE:]
        try:
            shared = box_sk.exchange(x25519.X25519PublicKey.from_public_bytes(eph_pk))
        except ValueError as exc:
            # low-order points yield an all-zero shared secret
            raise UnsealError("wrapped key carries an invalid ephemeral key") from exc
        wrap_key = _hkdf(shared, salt=eph_pk + self.box_pk, info=KEY_RELEASE_INFO)
        try:
            return AESGCM(wrap_key).decrypt(iv, body, aad)
        except InvalidTag as exc:
            raise UnsealError("wrapped key failed authentication") from exc

    def destroy(self) -> None:
        self._sk = None
        self._box_sk = None


def derive_enclave_keypair(platform: PlatformIdentity, m: Measurement) -> EnclaveKeyPair:
    root_secret = bytearray(platform.platform_signing_key.private_bytes_raw())
    sign_seed = bytearray(_hkdf(bytes(root_secret), salt=m.digest, info=b"OMG-enclave-sign-v1"))
    box_seed = bytearray(_hkdf(bytes(root_secret), salt=m.digest, info=b"OMG-enclave-box-v1"))
    try:
        sk = ed25519.Ed25519PrivateKey.from_private_bytes(bytes(sign_seed))
        box_sk = x25519.X25519PrivateKey.from_private_bytes(bytes(box_seed))
    finally:
        for buf in (root_secret, sign_seed, box_seed):
            buf[:] = bytes(len(buf))
    cert = _issue(
        platform.platform_signing_key,
        platform.platform_cert.issuer,
        role="enclave",
        subject_pk=sk.public_key().public_bytes_raw(),
        measurement=m.digest,
        box_pk=box_sk.public_key().public_bytes_raw(),
    )
    return EnclaveKeyPair(sk, box_sk, cert)


# ---------------------------------------------------------------------------
# Attestation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttestationReport:
    measurement: Measurement
    enclave_pk: bytes
    nonce: bytes
    signature: bytes
    enclave_cert: Certificate

    def signed_payload(self) -> bytes:
        return self.measurement.digest + self.enclave_pk + self.nonce

    def to_bytes(self) -> bytes:
        return encode_tlv([
            (0x01, self.measurement.digest),
            (0x02, self.enclave_pk),
            (0x03, self.nonce),
            (0x04, self.signature),
            (0x05, self.enclave_cert.to_bytes()),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttestationReport":
        try:
            fields = decode_tlv(data)
            return cls(
                measurement=Measurement(require(fields, 0x01, DIGEST_SIZE)),
                enclave_pk=require(fields, 0x02, 32),
                nonce=require(fields, 0x03, NONCE_SIZE),
                signature=require(fields, 0x04, SIGNATURE_SIZE),
                enclave_cert=Certificate.from_bytes(require(fields, 0x05)),
            )
        except TLVDecodeError as exc:
            raise CertificateError(f"malformed attestation report: {exc}") from exc


class RejectReason(str, Enum):
    BAD_SIGNATURE = "bad-signature"
    BAD_CHAIN = "bad-chain"
    MEASUREMENT_MISMATCH = "measurement-mismatch"


@dataclass(frozen=True)
class AttestationVerdict:
    accepted: bool
    reason: Optional[RejectReason] = None

    def __bool__(self) -> bool:
        return self.accepted


def sign_attestation(kp: EnclaveKeyPair, m: Measurement, n: bytes) -> AttestationReport:
    if len(n) != NONCE_SIZE:
        raise ValueError(f"attestation nonce must be {NONCE_SIZE} bytes")
    payload = m.digest + kp.pk + n
    return AttestationReport(
        measurement=m,
        enclave_pk=kp.pk,
        nonce=bytes(n),
        signature=kp.sign(payload),
        enclave_cert=kp.cert,
    )


def _chain_ok(report: AttestationReport, root: Certificate) -> bool:
    cert = report.enclave_cert
    return (
        root.role == "platform"
        and root.verify(root.subject_pk)
        and cert.role == "enclave"
        and cert.verify(root.subject_pk)
        and hmac.compare_digest(cert.subject_pk, report.enclave_pk)
        and cert.measurement is not None
        and hmac.compare_digest(cert.measurement, report.measurement.digest)
    )


def verify_attestation(report: AttestationReport, root: Certificate, expected: Measurement) -> AttestationVerdict:
    """Accept iff the chain, the signature and the measurement all check out.

    Checks run in that order; the first failure names the reject reason.
    """
    if not _chain_ok(report, root):
        return AttestationVerdict(False, RejectReason.BAD_CHAIN)
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(report.enclave_pk).verify(
            report.signature, report.signed_payload()
        )
    except (InvalidSignature, ValueError):
        return AttestationVerdict(False, RejectReason.BAD_SIGNATURE)
    if not hmac.compare_digest(report.measurement.digest, expected.digest):
        return AttestationVerdict(False, RejectReason.MEASUREMENT_MISMATCH)
    return AttestationVerdict(True)


# ---------------------------------------------------------------------------
# Model key and sealing
# ---------------------------------------------------------------------------

class ModelKey:
    """K_U. Held in a mutable buffer so it can be wiped once used."""

    __slots__ = ("_buf",)

    def __init__(self, key: bytes) -> None:
        if len(key) != KEY_SIZE:
            raise MalformedKeyError("model key must be 32 bytes")
        self._buf = bytearray(key)

    @property
    def key(self) -> bytes:
        return bytes(self._buf)

    def wipe(self) -> None:
        self._buf[:] = bytes(len(self._buf))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelKey):
            return NotImplemented
        return hmac.compare_digest(bytes(self._buf), bytes(other._buf))

    def __hash__(self) -> int:
        return hash(bytes(self._buf))

    def __repr__(self) -> str:
        return "ModelKey(<redacted>)"

    def __del__(self) -> None:
        try:
            self.wipe()
        except Exception:
            pass


def derive_model_key(pk: bytes, n: bytes) -> ModelKey:
    if len(pk) != 32:
        raise MalformedKeyError(f"enclave public key must be 32 bytes, got {len(pk)}")
    if len(n) != NONCE_SIZE:
        raise MalformedKeyError(f"nonce must be {NONCE_SIZE} bytes, got {len(n)}")
    return ModelKey(_hkdf(bytes(pk), salt=bytes(n), info=MODEL_KEY_INFO))


def seal_model(k: ModelKey, model: bytes, meta: ContainerMeta) -> SealedModelContainer:
    iv = random_bytes(IV_SIZE)
    sealed = AESGCM(k.key).encrypt(iv, bytes(model), meta.associated_data())
    return SealedModelContainer(
        model_version=meta.model_version,
        nonce=meta.nonce,
        iv=iv,
        ciphertext=sealed[:-TAG_SIZE],
        tag=sealed[-TAG_SIZE:],
    )


def unseal_model(k: ModelKey, sealed: SealedModelContainer) -> bytes:
    try:
        return AESGCM(k.key).decrypt(sealed.iv, sealed.ciphertext + sealed.tag, sealed.associated_data())
    except (InvalidTag, ValueError) as exc:
        raise UnsealError("sealed model failed authentication") from exc


def encrypt_to_enclave(box_pk: bytes, plaintext: bytes, aad: bytes) -> bytes:
    """Wrap ``plaintext`` for the holder of the enclave's X25519 key."""
    if len(box_pk) != 32:
        raise MalformedKeyError("key-transport public key must be 32 bytes")
    eph = x25519.X25519PrivateKey.generate()
    eph_pk = eph.public_key().public_bytes_raw()
    shared = eph.exchange(x25519.X25519PublicKey.from_public_bytes(box_pk))
    wrap_key = _hkdf(shared, salt=eph_pk + box_pk, info=KEY_RELEASE_INFO)
    iv = random_bytes(IV_SIZE)
    return eph_pk + iv + AESGCM(wrap_key).encrypt(iv, plaintext, aad)
