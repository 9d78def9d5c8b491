import numpy as np
import pytest

from rnode.dynamics import build_field


class FnField:
    """Wrap a plain ``fn(z, t)`` as a one-segment field on ``[0, T]``."""

    tape = None

    def __init__(self, fn, d, T=1.0):
        self.fn = fn
        self.d = d
        self.T = T

    def segments(self):
        return [(0.0, self.T, 0)]

    def __call__(self, z, t, block=None):
        return self.fn(z, t)


def random_field(d=2, hidden=16, depth=3, blocks=1, seed=0, scale=0.4):
    """An identity-initialized field knocked off zero by Gaussian noise."""
    field = build_field(d, hidden, depth, blocks, seed=seed)
    p = field.parameters()
    field.load_parameters(p + scale * np.random.default_rng(seed + 100).standard_normal(p.size))
    return field


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# (label, passed, detail) rows filled in by test_acceptance.py and printed at
# the end of the session, one line per criterion.
ACCEPTANCE_LOG = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LOG:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in ACCEPTANCE_LOG:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
