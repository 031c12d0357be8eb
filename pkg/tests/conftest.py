import numpy as np
import pytest
import yaml

from maple.hierarchy import from_dict

TOY_DOC = {
    "levels": 2,
    "nodes": [
        {"name": "A", "level": 1},
        {"name": "B", "level": 1},
        {"name": "a1", "level": 2, "parents": ["A"]},
        {"name": "a2", "level": 2, "parents": ["A"]},
        {"name": "b1", "level": 2, "parents": ["B"]},
    ],
}


@pytest.fixture
def toy():
    """Two levels, five nodes: A -> a1, a2 and B -> b1."""
    return from_dict(TOY_DOC)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_path(tmp_path):
    path = tmp_path / "toy.yaml"
    path.write_text(yaml.safe_dump(TOY_DOC, sort_keys=False))
    return path


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; lines are echoed in the terminal summary."""
    def record(num: int, ok: bool, detail: str) -> bool:
        line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
