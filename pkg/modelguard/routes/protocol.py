import logging

from fastapi import APIRouter, Depends, Request, Response
from fastapi.concurrency import run_in_threadpool

from ..dependencies import get_vendor
from ..transport import FRAME_MEDIA_TYPE
from ..vendor import VendorService

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/protocol", tags=["protocol"])


@router.post("/exchange")
async def exchange(request: Request, vendor: VendorService = Depends(get_vendor)):
    """One framed message in, one framed message out. Failures travel as ERROR frames."""
    frame = await request.body()
    reply = await run_in_threadpool(vendor.handle_frame, frame)
    return Response(content=reply, media_type=FRAME_MEDIA_TYPE)
