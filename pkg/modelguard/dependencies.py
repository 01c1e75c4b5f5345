import hmac
from typing import Optional

from fastapi import Header, HTTPException, Request, status

from .vendor import VendorService


def get_vendor(request: Request) -> VendorService:
    return request.app.state.vendor


def require_admin(request: Request, x_admin_token: Optional[str] = Header(default=None)) -> None:
    """Require the vendor's admin token on license-management routes"""
    if not x_admin_token:
        raise HTTPException(status_code=status.HTTP_401_UNAUTHORIZED, detail="Admin token required")
    if not hmac.compare_digest(x_admin_token.encode(), request.app.state.admin_token.encode()):
        raise HTTPException(status_code=status.HTTP_403_FORBIDDEN, detail="Admin privileges required")
