from __future__ import annotations

from datetime import datetime
from typing import Optional

from pydantic import BaseModel, Field


class LicenseResponse(BaseModel):
    enclavePk: str
    measurement: str
    authorized: bool
    modelVersion: int
    provisionedVersion: int
    updatedAt: Optional[datetime] = None


class RotationResponse(BaseModel):
    modelVersion: int
    nonce: str = Field(..., description="hex-encoded license nonce of the new version")
    rekeyedLicenses: int


class HealthResponse(BaseModel):
    status: str
    modelVersion: int
    licenses: int
