from __future__ import annotations

import os
import tempfile
from pathlib import Path


class StorageService:
    def atomic_write_bytes(self, path: str | Path, payload: bytes) -> int:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, temp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(payload)
                handle.flush()
                os.fsync(handle.fileno())
            os.replace(temp_name, target)
        except BaseException:
            _discard(temp_name)
            raise
        return len(payload)

    def atomic_write_text(self, path: str | Path, text: str) -> int:
        return self.atomic_write_bytes(path, text.encode("utf-8"))


def _discard(path: str) -> None:
    try:
        os.unlink(path)
    except FileNotFoundError:
        pass


storage_service = StorageService()
