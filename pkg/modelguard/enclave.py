"""In-process simulation of a SANCTUARY user-space enclave.

Isolation is enforced by the region abstraction: the commodity OS (and the
adversary who controls it) only ever reaches memory through
:func:`os_read_memory` / :func:`os_write_memory`. World switches are costed
in a ledger of simulated milliseconds rather than slept.
"""
from __future__ import annotations

import itertools
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Deque, Dict, Iterable, List, Optional, Set, Tuple

from .config import get_settings
from .crypto import (
    AttestationReport,
    EnclaveKeyPair,
    Measurement,
    PlatformIdentity,
    derive_enclave_keypair,
    measure,
    sign_attestation,
)
from .errors import AccessDenied, CoreBusy, EmptyPeripheral, ModelGuardError, ProtocolError, WrongState
from .features import AudioClip, read_wav
from .tracing import trace

logger = logging.getLogger(__name__)


class EnclaveState(str, Enum):
    UNLOADED = "UNLOADED"
    SETUP = "SETUP"
    BOOTED = "BOOTED"
    EXECUTING = "EXECUTING"
    PARKED = "PARKED"
    TORNDOWN = "TORNDOWN"


ALLOWED_TRANSITIONS: Dict[EnclaveState, Set[EnclaveState]] = {
    EnclaveState.UNLOADED: {EnclaveState.SETUP},
    EnclaveState.SETUP: {EnclaveState.BOOTED},
    EnclaveState.BOOTED: {EnclaveState.EXECUTING, EnclaveState.TORNDOWN},
    EnclaveState.EXECUTING: {EnclaveState.PARKED, EnclaveState.TORNDOWN},
    EnclaveState.PARKED: {EnclaveState.EXECUTING, EnclaveState.TORNDOWN},
    EnclaveState.TORNDOWN: set(),
}

LOCKED_STATES = frozenset({EnclaveState.SETUP, EnclaveState.BOOTED, EnclaveState.EXECUTING, EnclaveState.PARKED})


class RegionOwner(str, Enum):
    ENCLAVE = "ENCLAVE"
    OS = "OS"
    SHARED = "SHARED"


@dataclass(eq=False)
class SimulatedMemoryRegion:
    region_id: str
    owner: RegionOwner
    contents: bytearray = field(default_factory=bytearray)
    locked: bool = False
    zeroized: bool = False
    _slots: Dict[str, Tuple[int, int]] = field(default_factory=dict, repr=False)

    # Enclave-side accessors: only code running on the enclave core calls these.

    def store(self, name: str, data: bytes) -> None:
        old = self._slots.get(name)
        if old is not None and old[1] == len(data):
            self.contents[old[0]:old[0] + old[1]] = data
            return
        if old is not None:
            self.contents[old[0]:old[0] + old[1]] = bytes(old[1])
        self._slots[name] = (len(self.contents), len(data))
        self.contents += data
        self.zeroized = False

    def load(self, name: str) -> bytes:
        start, size = self._slots[name]
        return bytes(self.contents[start:start + size])

    def has(self, name: str) -> bool:
        return name in self._slots

    def discard(self, name: str) -> None:
        slot = self._slots.pop(name, None)
        if slot is not None:
            self.contents[slot[0]:slot[0] + slot[1]] = bytes(slot[1])

    def patch(self, offset: int, data: bytes) -> None:
        """Fault-injection hook: overwrite bytes as a pre-boot loader compromise would."""
        self.contents[offset:offset + len(data)] = data

    def zeroize(self) -> None:
        self.contents[:] = bytes(len(self.contents))
        self._slots.clear()
        self.zeroized = True


def _os_may_access(region: SimulatedMemoryRegion) -> bool:
    return not region.locked or region.owner in (RegionOwner.OS, RegionOwner.SHARED)


def os_read_memory(region: SimulatedMemoryRegion) -> bytes:
    if not _os_may_access(region):
        raise AccessDenied(f"region {region.region_id} is locked to its enclave core")
    return bytes(region.contents)


def os_write_memory(region: SimulatedMemoryRegion, data: bytes, offset: int = 0) -> None:
    if not _os_may_access(region):
        raise AccessDenied(f"region {region.region_id} is locked to its enclave core")
    region.contents[offset:offset + len(data)] = data


class CorePool:
    """CPU cores that can be dedicated to enclaves."""

    def __init__(self, size: int) -> None:
        if size < 1:
            raise ValueError("core pool needs at least one core")
        self.size = size
        self._reserved: Set[int] = set()
        self._lock = threading.Lock()

    def reserve(self, core_id: int) -> int:
        if not 0 <= core_id < self.size:
            raise ValueError(f"core {core_id} does not exist (pool of {self.size})")
        with self._lock:
            if core_id in self._reserved:
                raise CoreBusy(f"core {core_id} is already reserved")
            self._reserved.add(core_id)
        return core_id

    def reserve_any(self) -> int:
        with self._lock:
            for core_id in range(self.size):
                if core_id not in self._reserved:
                    self._reserved.add(core_id)
                    return core_id
        raise CoreBusy("no free core to resume on")

    def release(self, core_id: Optional[int]) -> None:
        if core_id is None:
            return
        with self._lock:
            self._reserved.discard(core_id)

    def is_reserved(self, core_id: int) -> bool:
        return core_id in self._reserved


@dataclass
class SwitchLedger:
    cost_ms: float
    count: int = 0

    @property
    def simulated_ms(self) -> float:
        return self.count * self.cost_ms

    def record(self, switches: int = 2) -> None:
        self.count += switches


class PeripheralKind(str, Enum):
    MICROPHONE = "MICROPHONE"


class SimulatedPeripheral:
    """Secure-world microphone fed from WAV fixtures."""

    def __init__(self, clips: Iterable[AudioClip] = (), kind: PeripheralKind = PeripheralKind.MICROPHONE) -> None:
        self.kind = kind
        self._queue: Deque[AudioClip] = deque(clips)

    @classmethod
    def from_directory(cls, directory: Path) -> "SimulatedPeripheral":
        paths = sorted(Path(directory).rglob("*.wav"))
        return cls(read_wav(p.read_bytes()) for p in paths)

    def push(self, clip: AudioClip) -> None:
        self._queue.append(clip)

    def __len__(self) -> int:
        return len(self._queue)

    def _secure_world_read(self) -> AudioClip:
        if not self._queue:
            raise EmptyPeripheral(f"{self.kind.value.lower()} has no pending input")
        return self._queue.popleft()


@dataclass
class EnclaveRequest:
    kind: str
    payload: Any = None


@dataclass
class EnclaveResponse:
    ok: bool
    payload: Any = None
    error: Optional[ModelGuardError] = None

    def unwrap(self) -> Any:
        if self.error is not None:
            raise self.error
        return self.payload


Handler = Callable[["EnclaveInstance", Any], Any]


@dataclass(eq=False)
class EnclaveInstance:
    instance_id: str
    code: bytes
    private_region: SimulatedMemoryRegion
    shared_region: SimulatedMemoryRegion
    switch_ledger: SwitchLedger
    core_id: Optional[int] = None
    state: EnclaveState = EnclaveState.UNLOADED
    measurement: Optional[Measurement] = None
    keypair: Optional[EnclaveKeyPair] = field(default=None, repr=False)
    report: Optional[AttestationReport] = field(default=None, repr=False)
    handlers: Dict[str, Handler] = field(default_factory=dict, repr=False)
    # Objects living in the enclave's private memory (parsed model, protocol state).
    secure_state: Dict[str, Any] = field(default_factory=dict, repr=False)
    history: List[Tuple[EnclaveState, EnclaveState]] = field(default_factory=list, repr=False)


class EnclaveHost:
    """The SANCTUARY side of one device: platform identity, cores and memory."""

    def __init__(
        self,
        platform: PlatformIdentity,
        core_count: Optional[int] = None,
        switch_cost_ms: Optional[float] = None,
    ) -> None:
        settings = get_settings()
        self.platform = platform
        self.cores = CorePool(core_count or settings.core_count)
        self.switch_cost_ms = settings.world_switch_ms if switch_cost_ms is None else switch_cost_ms
        self.regions: List[SimulatedMemoryRegion] = []
        self._ids = itertools.count()

    # -- lifecycle ---------------------------------------------------------

    def _transition(self, instance: EnclaveInstance, target: EnclaveState) -> None:
        if target not in ALLOWED_TRANSITIONS[instance.state]:
            raise WrongState(f"enclave {instance.instance_id}: {instance.state.value} -> {target.value} not allowed")
        instance.history.append((instance.state, target))
        trace("transition", enclave=instance.instance_id, src=instance.state, dst=target, core=instance.core_id)
        instance.state = target

    def _require(self, instance: EnclaveInstance, *states: EnclaveState) -> None:
        if instance.state not in states:
            expected = "|".join(s.value for s in states)
            raise WrongState(f"enclave {instance.instance_id} is {instance.state.value}, expected {expected}")

    def setup(self, code: bytes, core_id: int) -> EnclaveInstance:
        self.cores.reserve(core_id)
        ident = f"sa{next(self._ids)}"
        private = SimulatedMemoryRegion(f"{ident}-private", RegionOwner.ENCLAVE)
        private.store("code", bytes(code))
        private.locked = True
        shared = SimulatedMemoryRegion(f"{ident}-shared", RegionOwner.SHARED)
        self.regions.extend([private, shared])
        instance = EnclaveInstance(
            instance_id=ident,
            code=bytes(code),
            private_region=private,
            shared_region=shared,
            switch_ledger=SwitchLedger(self.switch_cost_ms),
            core_id=core_id,
        )
        self._transition(instance, EnclaveState.SETUP)
        logger.debug("Enclave %s set up on core %s (%d code bytes)", ident, core_id, len(code))
        return instance

    def boot(self, instance: EnclaveInstance, nonce: bytes) -> AttestationReport:
        self._require(instance, EnclaveState.SETUP)
        m = measure(instance.private_region.load("code"))
        kp = derive_enclave_keypair(self.platform, m)
        report = sign_attestation(kp, m, nonce)
        instance.measurement = m
        instance.keypair = kp
        instance.report = report
        self._transition(instance, EnclaveState.BOOTED)
        logger.info("Enclave %s booted, measurement %s", instance.instance_id, m.hex()[:16])
        return report

    def register_handler(self, instance: EnclaveInstance, kind: str, handler: Handler) -> None:
        instance.handlers[kind] = handler

    def execute(self, instance: EnclaveInstance, request: EnclaveRequest) -> EnclaveResponse:
        self._require(instance, EnclaveState.BOOTED, EnclaveState.EXECUTING)
        if instance.state == EnclaveState.BOOTED:
            self._transition(instance, EnclaveState.EXECUTING)
        handler = instance.handlers.get(request.kind)
        if handler is None:
            return EnclaveResponse(False, error=ProtocolError(f"no enclave handler for {request.kind!r}"))
        try:
            return EnclaveResponse(True, handler(instance, request.payload))
        except ModelGuardError as exc:
            logger.debug("Enclave handler %s failed: %s", request.kind, exc)
            return EnclaveResponse(False, error=exc)

    def world_switch_read(self, instance: EnclaveInstance, peripheral: SimulatedPeripheral) -> AudioClip:
        self._require(instance, EnclaveState.EXECUTING)
        clip = peripheral._secure_world_read()
        instance.switch_ledger.record(1)
        trace("world_switch", enclave=instance.instance_id, direction="sa->secure",
              count=instance.switch_ledger.count, sim_ms=instance.switch_ledger.simulated_ms)
        instance.shared_region.store("input", clip.to_pcm_bytes())
        instance.switch_ledger.record(1)
        trace("world_switch", enclave=instance.instance_id, direction="secure->sa",
              count=instance.switch_ledger.count, sim_ms=instance.switch_ledger.simulated_ms)
        return clip

    def park(self, instance: EnclaveInstance) -> None:
        self._require(instance, EnclaveState.EXECUTING)
        self.cores.release(instance.core_id)
        instance.core_id = None
        self._transition(instance, EnclaveState.PARKED)

    def resume(self, instance: EnclaveInstance) -> None:
        self._require(instance, EnclaveState.PARKED)
        instance.core_id = self.cores.reserve_any()
        self._transition(instance, EnclaveState.EXECUTING)

    def teardown(self, instance: EnclaveInstance) -> None:
        self._require(instance, EnclaveState.BOOTED, EnclaveState.EXECUTING, EnclaveState.PARKED)
        instance.private_region.zeroize()
        instance.private_region.locked = False
        instance.secure_state.clear()
        if instance.keypair is not None:
            instance.keypair.destroy()
        self.cores.release(instance.core_id)
        instance.core_id = None
        self._transition(instance, EnclaveState.TORNDOWN)
        logger.info("Enclave %s torn down, %d bytes zeroized", instance.instance_id, len(instance.private_region.contents))

    # -- adversary view ----------------------------------------------------

    def os_readable_memory(self) -> List[Tuple[str, bytes]]:
        """Everything the commodity OS can currently read."""
        visible = []
        for region in self.regions:
            try:
                visible.append((region.region_id, os_read_memory(region)))
            except AccessDenied:
                continue
        return visible
