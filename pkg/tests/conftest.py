import numpy as np
import pytest

from lmconv.net import ModelConfig, Network


def tiny_net(h=4, w=4, channels=1, hidden=6, depth=3, head="binary", seed=0, **kw):
    dil = kw.pop("dilations", ((1, 2, 1, 1) * depth)[:depth])
    cfg = ModelConfig(channels=channels, height=h, width=w, hidden=hidden, depth=depth,
                      dilations=dil, head=head, **kw)
    net = Network(cfg, seed=seed)
    # default init is tame; larger weights make causality leaks easier to see
    rng = np.random.default_rng(seed + 100)
    for k, v in net.params.items():
        v += 0.3 * rng.standard_normal(v.shape)
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def record(number, name, passed, detail=""):
    """Register one acceptance outcome for the end-of-run summary."""
    ACCEPTANCE[number] = (name, bool(passed), detail)
    print(f"criterion {number} {name}: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2} {name}: {detail}")
