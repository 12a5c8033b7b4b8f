import numpy as np
import pytest

from wpcl.envsim import GridEnvironment, ObjectInstance


def grid(rows, objects=(), seed=0, vocab=None):
    """Environment from ``.``/``#`` rows and ``(label, (x, y))`` objects."""
    walkable = tuple(tuple(ch == "." for ch in r) for r in rows)
    objs = tuple(ObjectInstance(i, lab, cell) for i, (lab, cell) in enumerate(objects))
    kw = {"vocab": tuple(vocab)} if vocab else {}
    return GridEnvironment(len(rows[0]), len(rows), walkable, objs, seed, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_GATE: list[tuple[int, bool, str]] = []


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def note(self, text: str) -> None:
        self.detail = text

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        line = f"{self.title}: {self.detail}" if self.detail else self.title
        if not ok and exc is not None:
            line += f" ({str(exc).splitlines()[0][:120]})" if str(exc) else ""
        _GATE.append((self.number, ok, line))
        print(f"criterion {self.number}: {'PASS' if ok else 'FAIL'} {line}")
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _GATE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, line in sorted(_GATE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {line}")
