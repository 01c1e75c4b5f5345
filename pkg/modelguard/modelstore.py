"""Untrusted local storage for sealed model containers.

Container layout (all integers little-endian)::

    offset  size  field
    0       4     magic "OMG1"
    4       4     model_version (u32)
    8       16    nonce n
    24      12    AES-GCM IV
    36      4     ciphertext length L (u32)
    40      L     ciphertext
    40+L    16    GCM tag

``magic | model_version | nonce`` (the first 24 bytes) is the AEAD associated
data. Nothing in this module touches key material.
"""
from __future__ import annotations

import hmac
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Tuple, Union

from .errors import ContainerParseError, RollbackDetected

logger = logging.getLogger(__name__)

MAGIC = b"OMG1"
NONCE_SIZE = 16
IV_SIZE = 12
TAG_SIZE = 16
_HEAD = struct.Struct("<4sI16s12sI")

PathLike = Union[str, os.PathLike]


@dataclass(frozen=True)
class ContainerMeta:
    model_version: int
    nonce: bytes

    def __post_init__(self) -> None:
        if not 0 <= self.model_version <= 0xFFFFFFFF:
            raise ValueError("model_version must fit in an unsigned 32-bit integer")
        if len(self.nonce) != NONCE_SIZE:
            raise ValueError(f"nonce must be {NONCE_SIZE} bytes")

    def associated_data(self) -> bytes:
        return MAGIC + struct.pack("<I", self.model_version) + self.nonce


@dataclass(frozen=True)
class SealedModelContainer:
    model_version: int
    nonce: bytes
    iv: bytes
    ciphertext: bytes
    tag: bytes

    @property
    def meta(self) -> ContainerMeta:
        return ContainerMeta(self.model_version, self.nonce)

    def associated_data(self) -> bytes:
        return self.meta.associated_data()

    def to_bytes(self) -> bytes:
        head = _HEAD.pack(MAGIC, self.model_version, self.nonce, self.iv, len(self.ciphertext))
        return head + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedModelContainer":
        if len(data) < _HEAD.size + TAG_SIZE:
            raise ContainerParseError(f"container truncated ({len(data)} bytes)")
        magic, version, nonce, iv, length = _HEAD.unpack_from(data, 0)
        if magic != MAGIC:
            raise ContainerParseError(f"bad magic {magic!r}")
        expected = _HEAD.size + length + TAG_SIZE
        if len(data) != expected:
            raise ContainerParseError(f"container length {len(data)} does not match header ({expected})")
        body = data[_HEAD.size:_HEAD.size + length]
        tag = data[_HEAD.size + length:]
        return cls(model_version=version, nonce=nonce, iv=iv, ciphertext=bytes(body), tag=bytes(tag))


def write_container(handle: PathLike, container: SealedModelContainer) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    path = Path(handle)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(container.to_bytes())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise


def read_container(handle: PathLike) -> SealedModelContainer:
    try:
        data = Path(handle).read_bytes()
    except FileNotFoundError as exc:
        raise ContainerParseError(f"no container at {handle}") from exc
    return SealedModelContainer.from_bytes(data)


def check_freshness(container: SealedModelContainer, expected_nonce: bytes, expected_version: int) -> None:
    """Advisory pre-decryption check; the nonce-derived key is what enforces freshness."""
    if container.model_version != expected_version or not hmac.compare_digest(container.nonce, expected_nonce):
        raise RollbackDetected(
            f"stored container v{container.model_version} does not match released v{expected_version}"
        )


class ModelStore:
    """Directory of sealed containers standing in for the device's unprotected storage."""

    def __init__(self, root: PathLike, name: str = "model.omg") -> None:
        self.root = Path(root)
        self.name = name

    @property
    def path(self) -> Path:
        return self.root / self.name

    def exists(self) -> bool:
        return self.path.is_file()

    def save(self, container: SealedModelContainer) -> Path:
        write_container(self.path, container)
        logger.debug("Stored sealed model v%s at %s", container.model_version, self.path)
        return self.path

    def load(self) -> SealedModelContainer:
        return read_container(self.path)

    def stored_version(self) -> int | None:
        if not self.exists():
            return None
        try:
            return self.load().model_version
        except ContainerParseError:
            logger.warning("Ignoring unparsable container at %s", self.path)
            return None

    def files(self) -> Iterator[Tuple[Path, bytes]]:
        """Every file on the untrusted medium, as the OS sees it."""
        if not self.root.exists():
            return
        for path in sorted(self.root.rglob("*")):
            if path.is_file():
                yield path, path.read_bytes()
