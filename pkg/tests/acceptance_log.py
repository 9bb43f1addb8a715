"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES: dict = {}


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES[number] = line
    print(line)
