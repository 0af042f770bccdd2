"""Collects one PASS/FAIL line per acceptance criterion for the end-of-run summary."""

RESULTS: dict[int, str] = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> str:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
    if detail:
        line += f"  ({detail})"
    RESULTS[number] = line
    print(line)
    return line
