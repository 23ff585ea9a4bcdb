import numpy as np
import pytest

from dsgdlab.problems import QuadraticProblem

# criterion number -> (passed, detail); filled by test_acceptance
CRITERIA = {}


def report(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])


def deterministic_quadratic(mats, vecs, alpha=0.0):
    """One-sample-per-agent quadratic: agent i has ``A_i = mats[i]``, ``b_i = vecs[i]``."""
    A = np.asarray(mats, dtype=float)[:, None]
    b = np.asarray(vecs, dtype=float)[:, None]
    return QuadraticProblem(A, b, alpha)


@pytest.fixture
def two_agent_identity():
    """Agents with ``A = I`` (symmetrized Hessian ``2I``) and zero ``b``."""
    return deterministic_quadratic([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])


def any_uniforms(shape, seed=0):
    return np.random.default_rng(seed).random(shape)
