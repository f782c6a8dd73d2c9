"""
Structured event logging.

Events are single-line JSON objects written to stderr. Logging is off by
default so CLI output (CSV, JSON-lines) can be piped untouched; enable it with
TNORM_SHIELD_ENABLE_LOGGING=1.
"""

from __future__ import annotations

import json
import os
import sys
from typing import Any


def logging_enabled() -> bool:
    return os.getenv("TNORM_SHIELD_ENABLE_LOGGING", "").lower() in ("1", "true", "yes")


def log_event(event: str, **kwargs: Any) -> None:
    if not logging_enabled():
        return
    try:
        payload = {"event": event, **kwargs}
        print(json.dumps(payload, default=str), file=sys.stderr, flush=True)
    except Exception:
        # Best-effort logging
        pass
