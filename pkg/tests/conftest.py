import numpy as np
import pytest

from invfam.kernels import KernelFamily

P_EVEN = np.array([[0.9, 0.1], [0.2, 0.8]])
P_ODD = np.array([[0.5, 0.5], [0.3, 0.7]])


def fixed_vector_2x2(P):
    """Left fixed vector of a 2x2 stochastic matrix from pi P = pi, pi_0 + pi_1 = 1."""
    # pi_0 P[0,1] = pi_1 P[1,0]
    a, b = P[0, 1], P[1, 0]
    return np.array([b / (a + b), a / (a + b)])


def random_stochastic(rng, d, floor=0.0):
    rows = rng.dirichlet(np.ones(d), size=d)
    return (1 - floor) * rows + floor / d


def random_periodic(rng, d=None, period=None, floor=0.3):
    d = d or int(rng.integers(2, 9))
    period = period or int(rng.integers(1, 5))
    return KernelFamily.periodic([random_stochastic(rng, d, floor) for _ in range(period)])


def drift_pair(K, V, gamma=0.5, margin=0.1):
    """Smallest C (plus margin) making (gamma, C) a valid drift pair on one period."""
    C = 0.0
    for n in range(K.period):
        C = max(C, float((K.matrix(n) @ V - gamma * V).max()))
    return gamma, C + margin


@pytest.fixture
def periodic():
    return KernelFamily.periodic([P_EVEN, P_ODD])


@pytest.fixture
def mu_even():
    return fixed_vector_2x2(P_EVEN @ P_ODD)


ACCEPTANCE = []


def record_criterion(number, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {name} ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
