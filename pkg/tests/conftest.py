import numpy as np
import pytest

from lmlp.structure import Conformation


def random_conformation(rng, n_atoms=6, numbers=(1, 6, 17), box=3.0, min_dist=0.8, labels=False):
    """Random cluster without overlapping atoms."""
    pos = []
    while len(pos) < n_atoms:
        cand = rng.uniform(-box / 2, box / 2, size=3)
        if all(np.linalg.norm(cand - p) >= min_dist for p in pos):
            pos.append(cand)
    z = rng.choice(numbers, size=n_atoms)
    conf = Conformation(z, np.array(pos))
    if labels:
        conf.energy = float(rng.normal())
        conf.forces = rng.normal(size=(n_atoms, 3))
    return conf


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line and fail the test when the criterion is not met."""
    def record(number: int, passed: bool, detail: str):
        _CRITERIA[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_CRITERIA[number])
        assert passed, _CRITERIA[number]
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
