"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

from __future__ import annotations

LINES: list[str] = []


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    LINES.append(line)
    assert ok, line
