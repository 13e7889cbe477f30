"""Shared state for the acceptance suite: result lines and the training cache."""

import os
from pathlib import Path

LINES: list[str] = []

CACHE = Path(os.environ.get("GRIDSIGNAL_ACCEPTANCE_CACHE",
                            Path(__file__).resolve().parent.parent / ".acceptance_cache"))


def record(code: str, ok: bool, detail: str) -> None:
    line = f"{code} {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
