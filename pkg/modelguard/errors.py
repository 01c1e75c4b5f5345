from __future__ import annotations

from typing import Dict, Type


class ModelGuardError(Exception):
    """Base class for every failure raised by the package.

    ``code`` travels in ERROR wire messages and enclave responses,
    ``exit_code`` is what the CLI returns for it.
    """

    code: str = "internal"
    exit_code: int = 10

    def __init__(self, detail: str = "") -> None:
        super().__init__(detail or self.code)
        self.detail = detail or self.code


# Crypto

class EntropyError(ModelGuardError):
    code = "entropy-failure"
    exit_code = 11


class MalformedKeyError(ModelGuardError):
    code = "malformed-key"
    exit_code = 12


class CertificateError(ModelGuardError):
    code = "bad-certificate"
    exit_code = 13


class UnsealError(ModelGuardError):
    """Authentication failure while opening a sealed blob."""

    code = "unseal-failure"
    exit_code = 6


# Storage

class ContainerParseError(ModelGuardError):
    code = "parse-error"
    exit_code = 14


class RollbackDetected(UnsealError):
    code = "rollback-detected"
    exit_code = 24


# Enclave

class WrongState(ModelGuardError):
    code = "wrong-state"
    exit_code = 15


class CoreBusy(ModelGuardError):
    code = "core-busy"
    exit_code = 16


class AccessDenied(ModelGuardError):
    code = "access-denied"
    exit_code = 17


class EmptyPeripheral(ModelGuardError):
    code = "empty-peripheral"
    exit_code = 18


# Protocol

class AttestationRejected(ModelGuardError):
    code = "attestation-rejected"
    exit_code = 5


class LicenseDenied(ModelGuardError):
    code = "license-denied"
    exit_code = 4


class UnknownEnclave(ModelGuardError):
    code = "unknown-enclave"
    exit_code = 19


class WrongPhase(ModelGuardError):
    code = "wrong-phase"
    exit_code = 20


class ProtocolError(ModelGuardError):
    code = "protocol-error"
    exit_code = 21


class TransportError(ModelGuardError):
    code = "transport-error"
    exit_code = 7


# Audio

class UnsupportedFormat(ModelGuardError):
    code = "unsupported-format"
    exit_code = 3


class MalformedWav(ModelGuardError):
    code = "malformed-wav"
    exit_code = 8


class WrongLength(ModelGuardError):
    code = "wrong-length"
    exit_code = 9


# Inference

class ShapeMismatch(ModelGuardError):
    code = "shape-mismatch"
    exit_code = 22


class ModelFormatError(ModelGuardError):
    code = "model-format"
    exit_code = 23


def _collect(cls: Type[ModelGuardError]) -> Dict[str, Type[ModelGuardError]]:
    found = {cls.code: cls}
    for sub in cls.__subclasses__():
        found.update(_collect(sub))
    return found


ERRORS_BY_CODE: Dict[str, Type[ModelGuardError]] = _collect(ModelGuardError)


def error_from_code(code: str, detail: str = "") -> ModelGuardError:
    """Rebuild a typed error from its wire code (unknown codes become ProtocolError)."""
    cls = ERRORS_BY_CODE.get(code)
    if cls is None:
        return ProtocolError(f"{code}: {detail}")
    return cls(detail)
