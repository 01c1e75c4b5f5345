"""Channels carrying framed protocol messages from the device to the vendor."""
from __future__ import annotations

import logging
from typing import Callable, List, Optional, Protocol

import httpx

from .config import get_settings
from .errors import TransportError
from .vendor import VendorService
from .wire import ProtocolMessage, decode_frame, encode_frame

logger = logging.getLogger(__name__)

EXCHANGE_PATH = "/protocol/exchange"
FRAME_MEDIA_TYPE = "application/octet-stream"

FrameFilter = Callable[[bytes], bytes]


class VendorChannel(Protocol):
    frames: List[bytes]

    def exchange(self, message: ProtocolMessage) -> ProtocolMessage: ...


class LoopbackVendorChannel:
    """In-process channel; records every frame in both directions.

    ``outbound`` / ``inbound`` let a network adversary rewrite frames.
    """

    def __init__(
        self,
        vendor: VendorService,
        *,
        outbound: Optional[FrameFilter] = None,
        inbound: Optional[FrameFilter] = None,
    ) -> None:
        self.vendor = vendor
        self.outbound = outbound
        self.inbound = inbound
        self.frames: List[bytes] = []

    def exchange(self, message: ProtocolMessage) -> ProtocolMessage:
        frame = encode_frame(message)
        if self.outbound is not None:
            frame = self.outbound(frame)
        self.frames.append(frame)
        reply = self.vendor.handle_frame(frame)
        if self.inbound is not None:
            reply = self.inbound(reply)
        self.frames.append(reply)
        return decode_frame(reply)


class HttpVendorChannel:
    """Frames as ``application/octet-stream`` bodies of ``POST /protocol/exchange``."""

    def __init__(
        self,
        base_url: str,
        *,
        timeout: Optional[float] = None,
        client: Optional[httpx.Client] = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self._owns_client = client is None
        self._client = client or httpx.Client(timeout=timeout or get_settings().http_timeout_seconds)
        self.frames: List[bytes] = []

    def exchange(self, message: ProtocolMessage) -> ProtocolMessage:
        frame = encode_frame(message)
        self.frames.append(frame)
        try:
            response = self._client.post(
                f"{self.base_url}{EXCHANGE_PATH}",
                content=frame,
                headers={"Content-Type": FRAME_MEDIA_TYPE},
            )
            response.raise_for_status()
        except httpx.HTTPStatusError as exc:
            raise TransportError(f"vendor answered HTTP {exc.response.status_code}") from exc
        except httpx.HTTPError as exc:
            logger.error("Vendor exchange failed: %s", exc)
            raise TransportError(f"cannot reach vendor at {self.base_url}: {exc}") from exc
        self.frames.append(response.content)
        return decode_frame(response.content)

    def close(self) -> None:
        if self._owns_client:
            self._client.close()

    def __enter__(self) -> "HttpVendorChannel":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
