"""Machine-parseable ``key=value`` trace lines for lifecycle events and world switches."""
from __future__ import annotations

import logging
from typing import Any, Dict

from .config import get_settings

trace_logger = logging.getLogger("modelguard.trace")


def _render(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.3f}"
    if isinstance(value, bytes):
        return value.hex()
    text = str(getattr(value, "value", value))
    return text if text and " " not in text else f'"{text}"'


def format_kv(event: str, **fields: Any) -> str:
    parts = [f"event={event}"]
    parts.extend(f"{key}={_render(val)}" for key, val in fields.items())
    return " ".join(parts)


def parse_kv(line: str) -> Dict[str, str]:
    """Inverse of :func:`format_kv` for lines without quoted values."""
    out: Dict[str, str] = {}
    for token in line.split():
        key, _, value = token.partition("=")
        out[key] = value.strip('"')
    return out


def trace(event: str, **fields: Any) -> None:
    if get_settings().trace_enabled:
        trace_logger.info(format_kv(event, **fields))
