"""Crash-safe file writes shared by every module that persists artifacts."""

from __future__ import annotations

import os
from pathlib import Path


def atomic_write(path, text: str) -> None:
    """Write to a sibling temp file and rename, so readers never see a torn file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
