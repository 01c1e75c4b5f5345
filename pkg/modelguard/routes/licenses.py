from typing import List

from fastapi import APIRouter, Depends, HTTPException, Request, status

from ..dependencies import get_vendor, require_admin
from ..errors import ModelFormatError, UnknownEnclave
from ..inference import load_model
from ..schemas import LicenseResponse, RotationResponse
from ..vendor import LicenseView, VendorService

router = APIRouter(prefix="/admin", tags=["admin-licenses"], dependencies=[Depends(require_admin)])


def _to_response(view: LicenseView) -> LicenseResponse:
    return LicenseResponse(
        enclavePk=view.enclave_pk,
        measurement=view.measurement,
        authorized=view.authorized,
        modelVersion=view.model_version,
        provisionedVersion=view.provisioned_version,
        updatedAt=view.updated_at,
    )


def _parse_pk(enclave_pk: str) -> bytes:
    try:
        raw = bytes.fromhex(enclave_pk)
    except ValueError:
        raw = b""
    if len(raw) != 32:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail="enclave_pk must be 64 hex characters")
    return raw


@router.get("/licenses", response_model=List[LicenseResponse])
def list_licenses(vendor: VendorService = Depends(get_vendor)):
    return [_to_response(v) for v in vendor.licenses()]


@router.post("/licenses/{enclave_pk}/authorize", response_model=LicenseResponse)
def authorize_license(enclave_pk: str, vendor: VendorService = Depends(get_vendor)):
    try:
        return _to_response(vendor.grant(_parse_pk(enclave_pk)))
    except UnknownEnclave as exc:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=exc.detail)


@router.post("/licenses/{enclave_pk}/revoke", response_model=LicenseResponse)
def revoke_license(enclave_pk: str, vendor: VendorService = Depends(get_vendor)):
    try:
        return _to_response(vendor.revoke(_parse_pk(enclave_pk)))
    except UnknownEnclave as exc:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=exc.detail)


@router.post("/model/rotate", response_model=RotationResponse)
async def rotate_model(request: Request, vendor: VendorService = Depends(get_vendor)):
    """Body: the new TCV1 model file as application/octet-stream."""
    blob = await request.body()
    try:
        load_model(blob)
    except ModelFormatError as exc:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=exc.detail)
    rotation = vendor.rotate_model(blob)
    return RotationResponse(
        modelVersion=rotation.model_version,
        nonce=rotation.nonce.hex(),
        rekeyedLicenses=len(rotation.containers),
    )
