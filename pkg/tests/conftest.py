import numpy as np
import pytest

from riscouple.impedance import ImpedanceBlocks
from riscouple.loads import LoadNetwork
from riscouple.scenario import build_scenario, config_from_dict

F_SEC5 = 28e9


def sec5_dict(rows=1, cols=None, spacing="lambda/16", tx=(5.0, -5.0, 3.0), rx=(5.0, 5.0, 1.0),
              frequency=F_SEC5, **load):
    """The reference setup: 28 GHz, l = lambda/32, a = lambda/500, R = 1 ohm, L = 1 nH."""
    cols = rows if cols is None else cols
    elem = {"length": "lambda/32", "radius": "lambda/500"}
    d = {"system": {"frequency_hz": frequency},
         "transmitter": {"positions": [list(tx)], **elem},
         "receiver": {"positions": [list(rx)], **elem},
         "ris": {"rows": rows, "cols": cols, "spacing": spacing, **elem,
                 "load": {"mode": "series", "resistance": 1.0, "inductance": 1e-9, **load}}}
    if rows * cols == 0:
        d["ris"] = {"rows": 0, "cols": 0}
    return d


def sec5_scenario(rows=1, **kw):
    return build_scenario(config_from_dict(sec5_dict(rows, **kw)))


def synthetic_blocks(rng, n_t, n_s, n_r, diag=(5.0, 20.0)):
    """Random complex symmetric system matrix with a passive-looking diagonal."""
    n = n_t + n_s + n_r
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    Z = 0.5 * (A + A.T) + np.diag(rng.uniform(*diag, n) + 1j * rng.normal(size=n) * 10)
    return ImpedanceBlocks(Z, n_t, n_s, n_r)


def random_network(rng, n_t, n_s, n_r):
    return LoadNetwork(rng.uniform(10, 80, n_t) + 1j * rng.normal(size=n_t) * 5,
                       rng.uniform(0.5, 3, n_s) + 1j * rng.normal(size=n_s) * 30,
                       rng.uniform(10, 80, n_r) + 1j * rng.normal(size=n_r) * 5,
                       rng.normal(size=n_t) + 1j * rng.normal(size=n_t))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def report(criterion, ok, detail):
    """Record and print one acceptance line; returns ``ok`` for asserting."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
