import dataclasses
import random
import struct

import pytest

from modelguard.crypto import derive_model_key, seal_model, unseal_model
from modelguard.errors import ContainerParseError, RollbackDetected, UnsealError
from modelguard.modelstore import (
    MAGIC,
    ContainerMeta,
    ModelStore,
    SealedModelContainer,
    check_freshness,
    read_container,
    write_container,
)

NONCE = bytes(range(16))


def make_container(version=1, nonce=NONCE, body=b"ciphertext") -> SealedModelContainer:
    return SealedModelContainer(model_version=version, nonce=nonce, iv=bytes(12), ciphertext=body, tag=b"T" * 16)


def test_container_layout():
    blob = make_container(version=7, body=b"abc").to_bytes()
    assert blob[:4] == MAGIC
    assert struct.unpack_from("<I", blob, 4)[0] == 7
    assert blob[8:24] == NONCE
    assert blob[24:36] == bytes(12)
    assert struct.unpack_from("<I", blob, 36)[0] == 3
    assert blob[40:43] == b"abc"
    assert blob[43:] == b"T" * 16
    assert SealedModelContainer.from_bytes(blob) == make_container(version=7, body=b"abc")


def test_associated_data_covers_magic_version_and_nonce():
    blob = make_container(version=2).to_bytes()
    assert make_container(version=2).associated_data() == blob[:24]
    assert ContainerMeta(2, NONCE).associated_data() == blob[:24]


@pytest.mark.parametrize("cut", [0, 10, 39, 55])
def test_truncated_container_is_a_parse_error(cut):
    blob = make_container().to_bytes()
    with pytest.raises(ContainerParseError):
        SealedModelContainer.from_bytes(blob[:cut])


def test_length_mismatch_and_bad_magic():
    blob = make_container().to_bytes()
    with pytest.raises(ContainerParseError, match="length"):
        SealedModelContainer.from_bytes(blob + b"\x00")
    with pytest.raises(ContainerParseError, match="magic"):
        SealedModelContainer.from_bytes(b"XXXX" + blob[4:])


def test_meta_validates_ranges():
    with pytest.raises(ValueError):
        ContainerMeta(-1, NONCE)
    with pytest.raises(ValueError):
        ContainerMeta(1, bytes(15))


def test_write_is_atomic_and_leaves_no_temp_files(tmp_path):
    path = tmp_path / "nested" / "model.omg"
    write_container(path, make_container(version=1))
    write_container(path, make_container(version=2))
    assert read_container(path).model_version == 2
    assert [p.name for p in path.parent.iterdir()] == ["model.omg"]


def test_read_missing_container(tmp_path):
    with pytest.raises(ContainerParseError):
        read_container(tmp_path / "absent.omg")


def test_freshness_check():
    container = make_container(version=3)
    check_freshness(container, NONCE, 3)
    with pytest.raises(RollbackDetected):
        check_freshness(container, NONCE, 4)
    with pytest.raises(RollbackDetected):
        check_freshness(container, bytes(16), 3)


def test_rollback_is_an_unseal_failure():
    assert issubclass(RollbackDetected, UnsealError)


def test_model_store(tmp_path):
    store = ModelStore(tmp_path / "storage")
    assert not store.exists()
    assert store.stored_version() is None
    assert list(store.files()) == []
    store.save(make_container(version=5))
    assert store.exists()
    assert store.stored_version() == 5
    assert store.load() == make_container(version=5)
    store.path.write_bytes(b"garbage")
    assert store.stored_version() is None
    assert [(p.name, data) for p, data in store.files()] == [("model.omg", b"garbage")]


@pytest.mark.parametrize("relabel", [True, False])
def test_container_claiming_the_current_version_under_an_old_key_fails_to_unseal(relabel):
    pk = bytes(range(32))
    old_nonce, new_nonce = bytes([1]) * 16, bytes([2]) * 16
    old_key, new_key = derive_model_key(pk, old_nonce), derive_model_key(pk, new_nonce)
    if relabel:
        old = seal_model(old_key, b"stale model", ContainerMeta(1, old_nonce))
        forged = dataclasses.replace(old, model_version=2, nonce=new_nonce)
    else:
        forged = seal_model(old_key, b"stale model", ContainerMeta(2, new_nonce))
    forged = SealedModelContainer.from_bytes(forged.to_bytes())
    check_freshness(forged, new_nonce, 2)
    with pytest.raises(UnsealError):
        unseal_model(new_key, forged)


def test_random_containers_survive_serialization():
    rng = random.Random(41)
    for _ in range(200):
        container = SealedModelContainer(
            model_version=rng.randrange(0, 1 << 32),
            nonce=rng.randbytes(16),
            iv=rng.randbytes(12),
            ciphertext=rng.randbytes(rng.choice([0, 1, rng.randrange(2, 5000)])),
            tag=rng.randbytes(16),
        )
        assert SealedModelContainer.from_bytes(container.to_bytes()) == container
