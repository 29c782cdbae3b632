import numpy as np
import pytest

from damlab import nn, pipeline
from damlab.config import default_config
from damlab.tensor import Rng


def central_diff(f, x, idx, h=1e-5):
    """Central finite differences of scalar ``f`` at the flat coordinates ``idx`` of ``x``."""
    out = np.empty(len(idx))
    for k, j in enumerate(idx):
        xp, xm = x.copy(), x.copy()
        xp.flat[j] += h
        xm.flat[j] -= h
        out[k] = (f(xp) - f(xm)) / (2 * h)
    return out


def max_rel_err(analytic, numeric, floor=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def well_conditioned(analytic, k, rng, thresh=1e-6):
    """Up to ``k`` coordinates whose gradient is not vanishingly small (relative error is meaningless at 0)."""
    cand = np.flatnonzero(np.abs(analytic) > thresh)
    return cand[np.sort(rng.choice(cand.size, min(k, cand.size)))]


@pytest.fixture
def small_net():
    arch = nn.ArchSpec(196, (16,), 4)
    params = nn.init_params(arch, Rng(3))
    return arch, params


@pytest.fixture(scope="session")
def cfg():
    return default_config()


@pytest.fixture(scope="session")
def zoo(cfg):
    return pipeline.build_zoo(cfg, enforce_gate=False)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
