"""Collects acceptance criterion outcomes for the terminal summary."""

from pathlib import Path

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"

LINES: dict[int, str] = {}


def report(number: int, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    LINES[number] = line
    print(line)
