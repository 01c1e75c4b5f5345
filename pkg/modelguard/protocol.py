"""The three OMG phases seen from the user's device.

:class:`ProtocolSession` is the untrusted host-side driver: it relays frames
between the vendor channel and the enclave, and keeps the session
transcript. Everything that touches attestation keys, K_U or the plaintext
model runs in the enclave handlers installed by :func:`install_enclave_app`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional, Union

from .crypto import (
    AttestationReport,
    AttestationVerdict,
    Certificate,
    Measurement,
    ModelKey,
    random_bytes,
    sign_attestation,
    unseal_model,
    verify_attestation,
)
from .enclave import (
    EnclaveHost,
    EnclaveInstance,
    EnclaveRequest,
    EnclaveState,
    SimulatedPeripheral,
)
from .errors import ContainerParseError, CoreBusy, LicenseDenied, ProtocolError, WrongPhase, error_from_code
from .features import AudioClip, make_fingerprint
from .inference import Classification, TinyConvModel, classify, load_model
from .modelstore import NONCE_SIZE, ModelStore, SealedModelContainer, check_freshness
from .transport import VendorChannel
from .wire import (
    AttestReport,
    ChallengeRequest,
    Challenge,
    ErrorMessage,
    KeyDenied,
    KeyRelease,
    KeyRequest,
    ModelCurrent,
    Principal,
    ProtocolMessage,
    ProvisionModel,
    Query,
    Result,
    SessionTranscript,
    encode_frame,
    key_release_aad,
    new_session_id,
)

logger = logging.getLogger(__name__)

PERIPHERAL_REF = "peripheral:microphone"


class Phase(str, Enum):
    NEW = "NEW"
    PREPARATION = "PREPARATION"
    INITIALIZED = "INITIALIZED"
    OPERATION = "OPERATION"


@dataclass(eq=False)
class EnclaveProtocolState:
    """Lives in the enclave's private memory for the lifetime of the instance."""

    transcript: SessionTranscript
    phase: Phase = Phase.NEW
    sealed: Optional[SealedModelContainer] = None
    model: Optional[TinyConvModel] = None

    def advance(self, phase: Phase) -> None:
        if phase == self.phase:
            return
        self.transcript.record_state(Principal.ENCLAVE, f"phase:{self.phase.value}->{phase.value}")
        self.phase = phase


class PreparedState(NamedTuple):
    report: AttestationReport
    user_verdict: AttestationVerdict
    provisioned: bool
    model_version: int


_STATE_KEY = "protocol"


def _state(instance: EnclaveInstance) -> EnclaveProtocolState:
    state = instance.secure_state.get(_STATE_KEY)
    if state is None:
        raise ProtocolError("enclave application is not installed")
    return state


# ---------------------------------------------------------------------------
# Enclave application
# ---------------------------------------------------------------------------

def install_enclave_app(host: EnclaveHost, instance: EnclaveInstance, store: ModelStore, transcript: SessionTranscript) -> None:
    instance.secure_state[_STATE_KEY] = EnclaveProtocolState(transcript)

    def attest(inst: EnclaveInstance, challenge: bytes) -> AttestationReport:
        return sign_attestation(inst.keypair, inst.measurement, challenge)

    def store_container(inst: EnclaveInstance, blob: bytes) -> int:
        state = _state(inst)
        container = SealedModelContainer.from_bytes(blob)
        store.save(container)
        state.sealed = container
        state.model = None
        state.advance(Phase.PREPARATION)
        return container.model_version

    def adopt_stored(inst: EnclaveInstance, model_version: int) -> int:
        state = _state(inst)
        container = store.load()
        if container.model_version != model_version:
            raise ProtocolError(f"stored container is v{container.model_version}, vendor expects v{model_version}")
        state.sealed = container
        state.model = None
        state.advance(Phase.PREPARATION)
        return container.model_version

    def key_release(inst: EnclaveInstance, release: KeyRelease) -> int:
        state = _state(inst)
        if state.phase not in (Phase.PREPARATION, Phase.INITIALIZED):
            raise WrongPhase(f"key release in phase {state.phase.value}")
        # Re-read: the untrusted medium may have changed since provisioning.
        container = store.load()
        check_freshness(container, release.nonce, release.model_version)
        aad = key_release_aad(state.transcript.session_id, release.nonce, release.model_version)
        key = ModelKey(inst.keypair.open_key_release(release.wrapped_key, aad))
        state.advance(Phase.INITIALIZED)
        try:
            plaintext = unseal_model(key, container)
        finally:
            key.wipe()
        inst.private_region.store("model", plaintext)
        state.sealed = container
        state.model = load_model(plaintext)
        state.advance(Phase.OPERATION)
        return container.model_version

    def query(inst: EnclaveInstance, source: Union[AudioClip, SimulatedPeripheral]) -> Classification:
        state = _state(inst)
        if state.phase != Phase.OPERATION or state.model is None:
            raise WrongPhase(f"query in phase {state.phase.value}")
        clip = host.world_switch_read(inst, source) if isinstance(source, SimulatedPeripheral) else source
        return classify(make_fingerprint(clip), state.model)

    for kind, handler in {
        "attest": attest,
        "store_container": store_container,
        "adopt_stored": adopt_stored,
        "key_release": key_release,
        "query": query,
    }.items():
        host.register_handler(instance, kind, handler)


# ---------------------------------------------------------------------------
# User client
# ---------------------------------------------------------------------------

class UserClient:
    """U's view: checks the attestation report it is shown and sends queries."""

    def __init__(self, root: Certificate, expected_measurement: Measurement) -> None:
        self.root = root
        self.expected_measurement = expected_measurement
        self.verdicts: list[AttestationVerdict] = []

    def check_attestation(self, report: AttestationReport) -> AttestationVerdict:
        verdict = verify_attestation(report, self.root, self.expected_measurement)
        self.verdicts.append(verdict)
        if verdict:
            logger.info("User accepted attestation of %s", report.enclave_pk.hex()[:16])
        else:
            logger.warning("User rejected attestation: %s", verdict.reason.value)
        return verdict


# ---------------------------------------------------------------------------
# Session driver
# ---------------------------------------------------------------------------

class ProtocolSession:
    def __init__(
        self,
        host: EnclaveHost,
        instance: EnclaveInstance,
        channel: VendorChannel,
        store: ModelStore,
        user: UserClient,
        *,
        peripheral: Optional[SimulatedPeripheral] = None,
        session_id: Optional[bytes] = None,
    ) -> None:
        self.host = host
        self.instance = instance
        self.channel = channel
        self.store = store
        self.user = user
        self.peripheral = peripheral
        self.session_id = session_id or new_session_id()
        self.transcript = SessionTranscript(self.session_id, clock=lambda: instance.switch_ledger.simulated_ms)
        # QUERY/RESULT frames exchanged between U and the enclave on the device.
        self.local_frames: list[bytes] = []
        install_enclave_app(host, instance, store, self.transcript)

    @property
    def phase(self) -> Phase:
        return _state(self.instance).phase

    def _send(self, message: ProtocolMessage) -> ProtocolMessage:
        self.transcript.record_message(Principal.ENCLAVE, Principal.VENDOR, message)
        reply = self.channel.exchange(message)
        self.transcript.record_message(Principal.VENDOR, Principal.ENCLAVE, reply)
        if isinstance(reply, ErrorMessage):
            raise error_from_code(reply.code, reply.detail)
        return reply

    def _ensure_running(self) -> None:
        if self.instance.state == EnclaveState.PARKED:
            self.host.resume(self.instance)

    def _call(self, kind: str, payload=None):
        return self.host.execute(self.instance, EnclaveRequest(kind, payload)).unwrap()

    def _stored_meta(self) -> tuple[Optional[int], Optional[bytes]]:
        if not self.store.exists():
            return None, None
        try:
            container = self.store.load()
        except ContainerParseError:
            return None, None
        return container.model_version, container.nonce

    def run_preparation(self) -> PreparedState:
        """Steps 1-4: attest to U and V, then receive and store the sealed model."""
        self._ensure_running()
        challenge = self._send(ChallengeRequest(session_id=self.session_id))
        if not isinstance(challenge, Challenge):
            raise ProtocolError(f"expected CHALLENGE, got {challenge.kind.name}")
        report: AttestationReport = self._call("attest", challenge.challenge)

        verdict = self.user.check_attestation(report)
        self.transcript.record_state(
            Principal.USER,
            "attestation-accepted" if verdict else f"attestation-rejected:{verdict.reason.value}",
        )

        stored_version, stored_nonce = self._stored_meta()
        reply = self._send(AttestReport(
            session_id=self.session_id,
            report=report.to_bytes(),
            stored_version=stored_version,
            stored_nonce=stored_nonce,
        ))
        if isinstance(reply, ProvisionModel):
            version = self._call("store_container", reply.container)
            provisioned = True
        elif isinstance(reply, ModelCurrent):
            version = self._call("adopt_stored", reply.model_version)
            provisioned = False
        else:
            raise ProtocolError(f"unexpected {reply.kind.name} after attestation")
        logger.info("Preparation complete: model v%s (%s)", version, "provisioned" if provisioned else "already stored")
        return PreparedState(report, verdict, provisioned, version)

    def run_initialization(self) -> int:
        """Steps 5-6: obtain K_U from V and decrypt the model inside the enclave."""
        self._ensure_running()
        if self.phase not in (Phase.PREPARATION, Phase.INITIALIZED):
            raise WrongPhase(f"initialization requires PREPARATION, enclave is {self.phase.value}")
        container = self.store.load()
        reply = self._send(KeyRequest(
            session_id=self.session_id,
            enclave_pk=self.instance.keypair.pk,
            model_version=container.model_version,
        ))
        if isinstance(reply, KeyDenied):
            raise LicenseDenied(reply.reason)
        if not isinstance(reply, KeyRelease):
            raise ProtocolError(f"unexpected {reply.kind.name} after key request")
        version = self._call("key_release", reply)
        self.host.park(self.instance)
        logger.info("Enclave %s in OPERATION with model v%s", self.instance.instance_id, version)
        return version

    def handle_query(self, source: Union[SimulatedPeripheral, AudioClip, None] = None) -> Result:
        """Steps 7-8: classify one clip from the secure peripheral or an inline clip."""
        source = source if source is not None else self.peripheral
        if source is None:
            raise ProtocolError("no audio source: pass a clip or attach a peripheral")
        if isinstance(source, AudioClip):
            query = Query(session_id=self.session_id, pcm=source.to_pcm_bytes())
        else:
            query = Query(session_id=self.session_id, audio_ref=PERIPHERAL_REF)
        self.transcript.record_message(Principal.USER, Principal.ENCLAVE, query)
        self.local_frames.append(encode_frame(query))

        self._ensure_running()
        try:
            outcome = self.host.execute(self.instance, EnclaveRequest("query", source))
        finally:
            if self.instance.state == EnclaveState.EXECUTING:
                self.host.park(self.instance)
        if outcome.error is not None:
            reply: ProtocolMessage = ErrorMessage(
                session_id=self.session_id, code=outcome.error.code, detail=outcome.error.detail
            )
        else:
            label, score = outcome.payload
            reply = Result(session_id=self.session_id, label=label, score=score)
        self.transcript.record_message(Principal.ENCLAVE, Principal.USER, reply)
        self.local_frames.append(encode_frame(reply))
        if outcome.error is not None:
            raise outcome.error
        return reply

    def close(self) -> None:
        if self.instance.state in (EnclaveState.BOOTED, EnclaveState.EXECUTING, EnclaveState.PARKED):
            self.host.teardown(self.instance)

    def __enter__(self) -> "ProtocolSession":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def open_session(
    host: EnclaveHost,
    code: bytes,
    channel: VendorChannel,
    store: ModelStore,
    user: UserClient,
    *,
    core_id: Optional[int] = None,
    peripheral: Optional[SimulatedPeripheral] = None,
) -> ProtocolSession:
    """Set up and boot an enclave for ``code`` on a free core and attach a session to it."""
    if core_id is None:
        free = [c for c in range(host.cores.size) if not host.cores.is_reserved(c)]
        if not free:
            raise CoreBusy("every core is reserved")
        core_id = free[0]
    instance = host.setup(code, core_id)
    host.boot(instance, random_bytes(NONCE_SIZE))
    return ProtocolSession(host, instance, channel, store, user, peripheral=peripheral)
