"""Collects one verdict per acceptance criterion for the end-of-session summary."""

RESULTS: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    RESULTS[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def lines() -> list[str]:
    return [f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}" for n, (ok, detail) in sorted(RESULTS.items())]
