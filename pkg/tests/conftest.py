import numpy as np
import pytest

from starhit import dataio
from starhit.model import ModelConfig


def tiny_config(n_pois=20, **kw):
    base = dict(n_pois=n_pois, d=8, d_k=16, h=2, k=2, l=2, L_max=16, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_splits():
    ds = dataio.synth_dataset(dataio.SynthSpec(n_users=4, days=10, seed=3))
    records = [c for t in ds.trajectories for c in t.checkins]
    return dataio.prepare_splits(records, 16, 10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
