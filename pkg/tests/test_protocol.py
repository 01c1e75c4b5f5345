from concurrent.futures import ThreadPoolExecutor

import pytest

from modelguard.crypto import RejectReason, derive_model_key, unseal_model
from modelguard.demo import demo_model_bytes, keyword_clip
from modelguard.enclave import EnclaveHost, EnclaveRequest, EnclaveState, SimulatedPeripheral
from modelguard.errors import (
    AttestationRejected,
    CoreBusy,
    EmptyPeripheral,
    LicenseDenied,
    ProtocolError,
    RollbackDetected,
    UnknownEnclave,
    UnsealError,
    WrongPhase,
)
from modelguard.protocol import PERIPHERAL_REF, Phase, open_session
from modelguard.tracing import parse_kv
from modelguard.wire import (
    AttestReport,
    ChallengeRequest,
    ErrorMessage,
    KeyRequest,
    MessageKind,
    Principal,
    decode_frame,
    key_release_aad,
    new_session_id,
)


def frame_kinds(frames):
    return [decode_frame(f).kind for f in frames]


def test_honest_session_reaches_operation(deployment):
    session = deployment.open()
    prepared = session.run_preparation()
    assert prepared.provisioned
    assert prepared.user_verdict.accepted
    assert prepared.model_version == 1
    assert session.phase == Phase.PREPARATION
    assert deployment.store.exists()

    assert session.run_initialization() == 1
    assert session.phase == Phase.OPERATION
    assert session.instance.state == EnclaveState.PARKED

    result = session.handle_query(keyword_clip("yes"))
    assert result.label == "yes"
    assert 0.0 < result.score <= 1.0
    session.close()
    assert session.instance.state == EnclaveState.TORNDOWN


def test_stored_model_is_not_provisioned_twice(deployment):
    with deployment.ready_session():
        pass
    seen = len(deployment.channel.frames)
    with deployment.open() as again:
        prepared = again.run_preparation()
        again.run_initialization()
        assert not prepared.provisioned
        kinds = frame_kinds(deployment.channel.frames[seen:])
        assert MessageKind.MODEL_CURRENT in kinds
        assert MessageKind.PROVISION_MODEL not in kinds
        assert again.handle_query(keyword_clip("left")).label == "left"


@pytest.mark.parametrize("authorized", [True, False])
@pytest.mark.parametrize("rolled_back", [True, False])
def test_key_release_needs_a_license_and_a_fresh_container(deployment, authorized, rolled_back):
    with deployment.ready_session():
        pass
    old = deployment.store.path.read_bytes()
    deployment.vendor.rotate_model(demo_model_bytes("int8"))

    with deployment.open() as session:
        assert session.run_preparation().provisioned
        if rolled_back:
            deployment.store.path.write_bytes(old)
        if not authorized:
            deployment.vendor.revoke(session.instance.keypair.pk)

        if not authorized:
            with pytest.raises(LicenseDenied):
                session.run_initialization()
        elif rolled_back:
            with pytest.raises(RollbackDetected):
                session.run_initialization()
        else:
            assert session.run_initialization() == 2
        assert (session.phase == Phase.OPERATION) == (authorized and not rolled_back)


def test_repeated_authorization_releases_the_same_key(deployment):
    with deployment.open() as session:
        session.run_preparation()
        kp = session.instance.keypair
        first = deployment.vendor.authorize(kp.pk, session_id=session.session_id)
        second = deployment.vendor.authorize(kp.pk, session_id=session.session_id)
        assert first.wrapped_key != second.wrapped_key
        keys = [
            kp.open_key_release(r.wrapped_key, key_release_aad(session.session_id, r.nonce, r.model_version))
            for r in (first, second)
        ]
        assert keys[0] == keys[1] == derive_model_key(kp.pk, deployment.vendor.model_nonce).key


def test_unknown_enclave_has_no_license(deployment):
    with pytest.raises(UnknownEnclave):
        deployment.vendor.authorize(bytes(32))
    with pytest.raises(UnknownEnclave):
        deployment.vendor.revoke(bytes(32))
    assert deployment.vendor.get_license(bytes(32)) is None


def test_revoked_license_can_be_granted_again(deployment):
    with deployment.open() as session:
        session.run_preparation()
        pk = session.instance.keypair.pk
        assert deployment.vendor.revoke(pk).authorized is False
        with pytest.raises(LicenseDenied):
            session.run_initialization()
        assert session.phase == Phase.PREPARATION
        assert deployment.vendor.grant(pk).authorized is True
        session.run_initialization()
        assert session.phase == Phase.OPERATION
    changes = deployment.vendor.admin_transcript.state_changes(Principal.VENDOR)
    assert [c.split(":")[0] for c in changes] == ["license-revoked", "license-granted"]


def test_rotation_retires_the_old_container(deployment):
    with deployment.ready_session() as first:
        pk = first.instance.keypair.pk
    old = deployment.store.load()
    rotation = deployment.vendor.rotate_model(demo_model_bytes())
    assert rotation.model_version == 2
    assert rotation.nonce != old.nonce
    with pytest.raises(UnsealError):
        unseal_model(derive_model_key(pk, rotation.nonce), old)
    assert rotation.containers[pk.hex()].ciphertext != old.ciphertext

    with deployment.ready_session() as second:
        assert deployment.store.load().model_version == 2
        assert second.handle_query(keyword_clip("stop")).label == "stop"
    license_view = deployment.vendor.get_license(pk)
    assert license_view.model_version == license_view.provisioned_version == 2


def test_each_version_opens_only_under_its_own_nonce(deployment):
    with deployment.ready_session() as session:
        pk = session.instance.keypair.pk
    containers = [deployment.store.load()]
    for _ in range(3):
        containers.append(deployment.vendor.rotate_model(demo_model_bytes("int8")).containers[pk.hex()])
    assert [c.model_version for c in containers] == [1, 2, 3, 4]
    for i, sealed in enumerate(containers):
        for j, other in enumerate(containers):
            key = derive_model_key(pk, other.nonce)
            if i == j:
                unseal_model(key, sealed)
            else:
                with pytest.raises(UnsealError):
                    unseal_model(key, sealed)


def test_key_release_is_bound_to_its_session(deployment):
    with deployment.ready_session():
        pass
    with deployment.open() as first, deployment.open() as second:
        first.run_preparation()
        second.run_preparation()
        pk = first.instance.keypair.pk
        stolen = deployment.vendor.authorize(pk, session_id=first.session_id)
        outcome = deployment.host.execute(second.instance, EnclaveRequest("key_release", stolen))
        assert isinstance(outcome.error, UnsealError)
        assert second.phase == Phase.PREPARATION
        assert deployment.host.execute(first.instance, EnclaveRequest("key_release", stolen)).ok


def test_tampered_key_release_is_a_typed_failure(deployment):
    with deployment.open() as session:
        session.run_preparation()
        good = deployment.vendor.authorize(session.instance.keypair.pk, session_id=session.session_id)
        forged = good.model_copy(update={"wrapped_key": bytes(32) + good.wrapped_key[32:]})
        outcome = deployment.host.execute(session.instance, EnclaveRequest("key_release", forged))
        assert isinstance(outcome.error, UnsealError)
        assert session.phase == Phase.PREPARATION


def test_query_before_initialization_is_refused(deployment):
    with deployment.open() as session:
        session.run_preparation()
        with pytest.raises(WrongPhase):
            session.handle_query(keyword_clip("yes"))
        assert session.instance.state == EnclaveState.PARKED
        reply = decode_frame(session.local_frames[-1])
        assert isinstance(reply, ErrorMessage) and reply.code == "wrong-phase"


def test_initialization_before_preparation_is_refused(deployment):
    with deployment.open() as session:
        with pytest.raises(WrongPhase):
            session.run_initialization()


def test_queries_do_not_contact_the_vendor(deployment):
    with deployment.ready_session() as session:
        seen = len(deployment.channel.frames)
        labels = [session.handle_query(keyword_clip(w)).label for w in ("up", "down")]
        assert labels == ["up", "down"]
        assert len(deployment.channel.frames) == seen
        assert frame_kinds(session.local_frames) == [
            MessageKind.QUERY, MessageKind.RESULT, MessageKind.QUERY, MessageKind.RESULT,
        ]


def test_query_without_a_source(deployment):
    with deployment.ready_session() as session:
        with pytest.raises(ProtocolError):
            session.handle_query()


def test_peripheral_query_costs_two_world_switches(deployment):
    peripheral = SimulatedPeripheral([keyword_clip("no")])
    with deployment.ready_session(peripheral) as session:
        ledger = session.instance.switch_ledger
        before_count, before_ms = ledger.count, ledger.simulated_ms
        result = session.handle_query()
        assert result.label == "no"
        assert ledger.count - before_count == 2
        assert ledger.simulated_ms - before_ms == pytest.approx(0.6)
        query = decode_frame(session.local_frames[0])
        assert query.audio_ref == PERIPHERAL_REF and query.pcm is None
        with pytest.raises(EmptyPeripheral):
            session.handle_query()
        assert session.instance.state == EnclaveState.PARKED


def test_transcripts_record_every_step(deployment):
    with deployment.ready_session() as session:
        session.handle_query(keyword_clip("on"))
        transcript = session.transcript
        assert transcript.state_changes(Principal.ENCLAVE) == [
            "phase:NEW->PREPARATION",
            "phase:PREPARATION->INITIALIZED",
            "phase:INITIALIZED->OPERATION",
        ]
        assert transcript.state_changes(Principal.USER) == ["attestation-accepted"]
        assert [m.kind for m in transcript.messages()] == [
            MessageKind.CHALLENGE_REQUEST, MessageKind.CHALLENGE,
            MessageKind.ATTEST_REPORT, MessageKind.PROVISION_MODEL,
            MessageKind.KEY_REQUEST, MessageKind.KEY_RELEASE,
            MessageKind.QUERY, MessageKind.RESULT,
        ]
        stamps = [e.timestamp_ms for e in transcript.entries]
        assert stamps == sorted(stamps)
        assert {parse_kv(line)["event"] for line in transcript.export_lines()} == {"message", "state"}

        vendor_side = deployment.vendor.transcript(session.session_id)
        assert vendor_side.state_changes(Principal.VENDOR) == [
            "challenge-issued",
            "attestation-accepted",
            "license-registered:authorized=True",
            "license-provisioned:v1",
        ]
        assert len(vendor_side.messages()) == 6


def test_modified_enclave_is_refused_by_user_and_vendor(deployment):
    with deployment.open(code=deployment.code + b"\x00backdoor") as session:
        with pytest.raises(AttestationRejected):
            session.run_preparation()
        assert session.phase == Phase.NEW
        assert deployment.user.verdicts[-1].reason == RejectReason.MEASUREMENT_MISMATCH
        assert session.transcript.state_changes(Principal.USER) == ["attestation-rejected:measurement-mismatch"]
    assert not deployment.store.exists()
    assert deployment.vendor.licenses() == []


def test_replayed_attestation_report_is_refused(deployment):
    with deployment.open() as session:
        prepared = session.run_preparation()
        reply = deployment.channel.exchange(AttestReport(session_id=session.session_id, report=prepared.report.to_bytes()))
        assert isinstance(reply, ErrorMessage)
        assert reply.code == "attestation-rejected"


def test_key_request_needs_attestation_in_the_same_session(deployment):
    with deployment.open() as session:
        session.run_preparation()
        reply = deployment.channel.exchange(
            KeyRequest(session_id=new_session_id(), enclave_pk=session.instance.keypair.pk, model_version=1)
        )
        assert isinstance(reply, ErrorMessage)
        assert reply.code == "attestation-rejected"


def test_tampered_container_fails_initialization(deployment):
    with deployment.open() as session:
        session.run_preparation()
        blob = bytearray(deployment.store.path.read_bytes())
        blob[-20] ^= 0x40
        deployment.store.path.write_bytes(bytes(blob))
        with pytest.raises(UnsealError):
            session.run_initialization()
        assert session.phase != Phase.OPERATION
        assert not session.instance.private_region.has("model")


def test_parked_enclave_gives_its_core_back(deployment, platform):
    host = EnclaveHost(platform, core_count=1)
    first = open_session(host, deployment.code, deployment.channel, deployment.store, deployment.user)
    first.run_preparation()
    first.run_initialization()
    assert not host.cores.is_reserved(0)

    second = open_session(host, deployment.code, deployment.channel, deployment.store, deployment.user)
    with pytest.raises(CoreBusy):
        open_session(host, deployment.code, deployment.channel, deployment.store, deployment.user)
    with pytest.raises(CoreBusy):
        first.handle_query(keyword_clip("off"))
    second.close()
    assert first.handle_query(keyword_clip("off")).label == "off"
    first.close()


def test_vendor_keeps_a_bounded_number_of_sessions(deployment):
    deployment.vendor.max_sessions = 16
    for _ in range(5000):
        deployment.vendor.handle(ChallengeRequest(session_id=new_session_id()))
    assert deployment.vendor.session_count == 16

    with deployment.ready_session() as session:
        assert session.handle_query(keyword_clip("go")).label == "go"
        assert len(deployment.vendor.transcript(session.session_id).messages()) == 6
    assert deployment.vendor.session_count == 16
    with pytest.raises(KeyError):
        deployment.vendor.transcript(bytes(8))


def test_authorization_during_rotation_sees_a_published_nonce(deployment):
    with deployment.ready_session() as session:
        pk = session.instance.keypair.pk
    vendor = deployment.vendor
    published = {(vendor.model_version, vendor.model_nonce)}
    model = demo_model_bytes("int8")

    def rotate():
        for _ in range(10):
            rotation = vendor.rotate_model(model)
            published.add((rotation.model_version, rotation.nonce))

    def authorize():
        return [vendor.authorize(pk) for _ in range(40)]

    def read_licenses():
        return [vendor.licenses()[0] for _ in range(40)]

    with ThreadPoolExecutor(max_workers=4) as pool:
        rotating = pool.submit(rotate)
        releases = [pool.submit(authorize) for _ in range(2)]
        views = pool.submit(read_licenses)
        rotating.result()
        released = [r for future in releases for r in future.result()]

    assert all((r.model_version, r.nonce) in published for r in released)
    assert all(1 <= v.model_version <= 11 for v in views.result())
    assert vendor.get_license(pk).model_version == 11
