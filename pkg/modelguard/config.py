from functools import lru_cache
from typing import Literal, Optional

from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    app_name: str = "Offline Model Guard Vendor"

    # Simulated SANCTUARY platform
    core_count: int = 8  # HiKey 960 is octa-core
    world_switch_ms: float = 0.3
    platform_seed: Optional[str] = None  # hex; random when unset

    # Vendor endpoint
    vendor_host: str = "127.0.0.1"
    vendor_port: int = 8750
    admin_token: str = "changeme"
    license_db_url: str = "sqlite://"
    auto_authorize: bool = True
    model_file: str = ""
    code_image: str = ""
    platform_cert: str = ""
    http_timeout_seconds: float = 10.0
    max_vendor_sessions: int = 1024  # oldest idle sessions are dropped beyond this

    # Enclave host
    storage_dir: str = "./omg-storage"

    # Audio frontend
    drop_bin: Literal["nyquist", "dc"] = "nyquist"

    # Logging
    log_level: str = "INFO"
    trace_enabled: bool = True

    class Config:
        env_file = ".env.modelguard"
        env_prefix = "OMG_"


@lru_cache
def get_settings() -> Settings:
    return Settings()
