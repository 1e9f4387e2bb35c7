from __future__ import annotations

import json
import logging
import sys
from datetime import datetime, timezone

from posefield.core.config import settings

RESERVED_KEYS = frozenset({"ts", "level", "logger", "message", "pid"})
NOISY_LOGGERS = ("matplotlib", "PIL")
TEXT_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": datetime.fromtimestamp(record.created, timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "pid": record.process,
        }

        context = getattr(record, "context", None)
        if isinstance(context, dict):
            payload.update({key: value for key, value in context.items() if key not in RESERVED_KEYS})

        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)

        return json.dumps(payload, ensure_ascii=False, default=str)


def setup_logging(*, json_logs: bool | None = None, level: str | None = None) -> None:
    """Install one stderr handler on the root logger; later calls are no-ops."""
    root_logger = logging.getLogger()
    if root_logger.handlers:
        return

    use_json = settings.OBS_LOG_JSON if json_logs is None else json_logs
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if use_json else logging.Formatter(TEXT_FORMAT))

    root_logger.setLevel(str(level or settings.OBS_LOG_LEVEL).upper())
    root_logger.addHandler(handler)
    for name in NOISY_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)
