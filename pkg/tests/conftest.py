import time
import types

import numpy as np
import pytest

from preemptkit import pipeline as pl
from preemptkit.diffnet import ModelParams, Network, NetworkDef, dense, flatten


def linear_binary(shape=(1, 4, 4), seed=0, dtype=np.float32):
    """Single dense layer with K=2; the input gradient sign is sign(w1 - w0) everywhere."""
    n = int(np.prod(shape))
    rng = np.random.default_rng(seed)
    w = rng.normal(0, 1, size=(2, n))
    # keep every coordinate of w1 - w0 well away from zero
    diff = w[1] - w[0]
    w[1] = w[0] + np.where(diff >= 0, 1, -1) * np.maximum(np.abs(diff), 0.1)
    nd = NetworkDef((flatten(), dense(n, 2)), shape, 2)
    params = ModelParams([w.astype(dtype), np.zeros(2, dtype=dtype)])
    net = Network(nd, params)
    s = np.sign(w[1] - w[0]).reshape(shape)
    return net, s


def constant_model(shape=(1, 4, 4), k=3):
    n = int(np.prod(shape))
    nd = NetworkDef((flatten(), dense(n, k)), shape, k)
    return Network(nd, ModelParams([np.zeros((k, n), np.float32), np.zeros(k, np.float32)]))


@pytest.fixture
def linear():
    return linear_binary


@pytest.fixture(scope="session")
def desk():
    """The default desk pipeline: synthetic data and the four trained roles."""
    t0 = time.perf_counter()
    cfg = pl.resolve_config()
    train_ds, test_ds = pl.load_data(cfg)
    models = pl.desk_models(cfg, train_ds)
    return types.SimpleNamespace(cfg=cfg, train=train_ds, test=test_ds, train_seconds=time.perf_counter() - t0,
                                 **models)


# -- acceptance bookkeeping ------------------------------------------------------

ACCEPTANCE = {}


def record(number, title, status, detail=""):
    ACCEPTANCE[number] = (title, status, detail)
    print(f"criterion {number} {status}: {title} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{number}] {status:<9} {title}  {detail}")
