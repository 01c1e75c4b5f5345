import logging
from contextlib import asynccontextmanager
from typing import Optional

from fastapi import FastAPI

from .config import get_settings
from .routes import licenses, protocol
from .schemas import HealthResponse
from .vendor import VendorService

logger = logging.getLogger(__name__)


def create_app(vendor: VendorService, admin_token: Optional[str] = None) -> FastAPI:
    settings = get_settings()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        logger.info("🚀 Starting model vendor endpoint...")
        logger.info(
            f"📦 Serving model v{vendor.model_version}, "
            f"expected measurement {vendor.expected_measurement.hex()[:16]}, "
            f"{len(vendor.trusted_roots)} trusted platform root(s)"
        )
        if app.state.admin_token == "changeme":
            logger.warning("⚠️  Admin token is the default; set OMG_ADMIN_TOKEN")
        logger.info("🎉 Vendor ready to accept attestation reports.")
        yield
        logger.info("🛑 Shutting down vendor endpoint...")

    app = FastAPI(title=settings.app_name, lifespan=lifespan)
    app.state.vendor = vendor
    app.state.admin_token = admin_token or settings.admin_token

    app.include_router(protocol.router)
    app.include_router(licenses.router)

    @app.get("/health", response_model=HealthResponse)
    def health_check():
        return HealthResponse(status="ok", modelVersion=vendor.model_version, licenses=len(vendor.licenses()))

    return app
