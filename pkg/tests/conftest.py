from pathlib import Path

import pytest

from modelguard.config import get_settings
from modelguard.crypto import generate_platform_identity
from modelguard.demo import LocalDeployment, demo_model_bytes


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch, tmp_path):
    monkeypatch.chdir(tmp_path)
    for var in ("OMG_PLATFORM_SEED", "OMG_MODEL_FILE", "OMG_CODE_IMAGE", "OMG_PLATFORM_CERT", "OMG_AUTO_AUTHORIZE"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("OMG_STORAGE_DIR", str(tmp_path / "omg-storage"))
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture(scope="session")
def platform():
    return generate_platform_identity(bytes(range(32)))


@pytest.fixture(scope="session")
def model_int8() -> bytes:
    return demo_model_bytes("int8")


@pytest.fixture
def deployment(tmp_path, platform) -> LocalDeployment:
    return LocalDeployment.create(Path(tmp_path) / "device", platform=platform, auto_authorize=True)
