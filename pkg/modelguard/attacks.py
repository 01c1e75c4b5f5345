"""Adversary scenarios: each drives one attack and reports whether the defense held."""
from __future__ import annotations

import logging
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

from .demo import MARKER, LocalDeployment, demo_model, keyword_clip
from .enclave import os_read_memory
from .errors import AccessDenied, AttestationRejected, LicenseDenied, RollbackDetected, UnsealError
from .inference import save_model
from .protocol import Phase, ProtocolSession

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackOutcome:
    scenario: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{self.scenario}: {'PASS' if self.passed else 'FAIL'} ({self.detail})"


def _tamper_model(workdir: Path) -> AttackOutcome:
    dep = LocalDeployment.create(workdir)
    session = dep.open()
    session.run_preparation()
    blob = bytearray(dep.store.path.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    dep.store.path.write_bytes(bytes(blob))
    try:
        session.run_initialization()
    except UnsealError as exc:
        ok = session.phase != Phase.OPERATION
        return AttackOutcome("tamper-model", ok, f"initialization failed with {exc.code}")
    finally:
        session.close()
    return AttackOutcome("tamper-model", False, "tampered container was accepted")


def _rollback(workdir: Path) -> AttackOutcome:
    dep = LocalDeployment.create(workdir)
    with dep.ready_session():
        pass
    old = dep.store.path.read_bytes()
    dep.vendor.rotate_model(save_model(demo_model(), "int8"))
    session = dep.open()
    try:
        session.run_preparation()
        dep.store.path.write_bytes(old)
        try:
            session.run_initialization()
        except RollbackDetected as exc:
            return AttackOutcome("rollback", session.phase != Phase.OPERATION, f"stale container refused ({exc.code})")
        except UnsealError as exc:
            return AttackOutcome("rollback", session.phase != Phase.OPERATION, f"stale container failed to unseal ({exc.code})")
        return AttackOutcome("rollback", False, "old model version was decrypted")
    finally:
        session.close()


def _revoke(workdir: Path) -> AttackOutcome:
    dep = LocalDeployment.create(workdir)
    session = dep.open()
    try:
        session.run_preparation()
        dep.vendor.revoke(session.instance.keypair.pk)
        try:
            session.run_initialization()
        except LicenseDenied:
            return AttackOutcome("revoke", session.phase == Phase.PREPARATION, "vendor withheld K_U")
        return AttackOutcome("revoke", False, "revoked enclave reached OPERATION")
    finally:
        session.close()


def _tamper_enclave(workdir: Path) -> AttackOutcome:
    dep = LocalDeployment.create(workdir)
    instance = dep.host.setup(dep.code, 0)
    instance.private_region.patch(0, b"EVIL")
    dep.host.boot(instance, bytes(16))
    session = ProtocolSession(dep.host, instance, dep.channel, dep.store, dep.user)
    try:
        session.run_preparation()
    except AttestationRejected as exc:
        leaked = dep.store.exists()
        return AttackOutcome("tamper-enclave", not leaked, f"vendor refused provisioning: {exc.detail}")
    finally:
        session.close()
    return AttackOutcome("tamper-enclave", False, "modified enclave received the model")


def _os_read(workdir: Path) -> AttackOutcome:
    dep = LocalDeployment.create(workdir)
    session = dep.open()
    region = session.instance.private_region
    denied: List[str] = []

    def try_read() -> None:
        try:
            os_read_memory(region)
        except AccessDenied:
            denied.append(session.instance.state.value)

    try_read()
    session.run_preparation()
    try_read()
    session.run_initialization()
    try_read()
    session.handle_query(keyword_clip("yes"))
    try_read()
    session.close()
    after = os_read_memory(region)
    zeros = not any(after) and not any(MARKER in data for _, data in dep.host.os_readable_memory())
    ok = len(denied) == 4 and zeros
    return AttackOutcome("os-read", ok, f"denied while {'/'.join(denied)}; zeroized after teardown: {zeros}")


SCENARIOS: Dict[str, Callable[[Path], AttackOutcome]] = {
    "tamper-model": _tamper_model,
    "rollback": _rollback,
    "revoke": _revoke,
    "tamper-enclave": _tamper_enclave,
    "os-read": _os_read,
}


def run_scenario(name: str, workdir: Optional[Path] = None) -> AttackOutcome:
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    if workdir is not None:
        return SCENARIOS[name](Path(workdir))
    with tempfile.TemporaryDirectory(prefix=f"omg-{name}-") as scratch:
        return SCENARIOS[name](Path(scratch))
