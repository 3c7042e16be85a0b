import numpy as np
import pytest

from prunekit import netir


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_biases(net, rng, scale=0.1):
    params = dict(net.params)
    for k in params:
        if k.endswith(".bias"):
            params[k] = rng.normal(0, scale, params[k].shape).astype(np.float32)
    return net.evolve(params=params)


def tiny_plain(rng, c_in=2, hw=7, widths=(4, 3), head=2):
    layers = [netir.conv("c1", c_in, widths[0], 3), netir.relu("r1"),
              netir.maxpool("p1", 2, 1),
              netir.conv("c2", widths[0], widths[1], 3, padding=0), netir.relu("r2"),
              netir.gap("gap"), netir.linear("fc", widths[1], head)]
    return randomize_biases(netir.build(layers, (c_in, hw, hw), rng), rng)


def tiny_mfm(rng, c_in=1, hw=6):
    layers = [netir.conv("c1", c_in, 6, 3), netir.mfm("m1", 3),
              netir.conv("c2", 3, 4, 3), netir.mfm("m2", 2),
              netir.gap("gap"), netir.linear("fc", 2, 1)]
    return randomize_biases(netir.build(layers, (c_in, hw, hw), rng), rng)


# acceptance criteria register their outcome here; the summary prints one line each
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
