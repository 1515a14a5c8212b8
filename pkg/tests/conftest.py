import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def trained_toy(seed: int = 0, n: int = 256):
    """A small MLP fitted to a nonlinear 5-feature rule; returns (logit fn, inputs)."""
    from amffuse import tensor as T
    from amffuse.nn import MLP, Adam
    from amffuse.tensor import Tensor

    r = np.random.default_rng(seed)
    X = r.normal(size=(n, 5))
    y = (X[:, 0] + 0.5 * X[:, 1] ** 2 - X[:, 3] > 0.3).astype(float)
    mlp = MLP(5, 1, r, hidden=16)
    opt = Adam(mlp.parameters(), lr=1e-2)
    for _ in range(200):
        opt.zero_grad()
        z = T.reshape(mlp(Tensor(X)), (-1,))
        T.mean(T.softplus(-z) * y + T.softplus(z) * (1 - y)).backward()
        opt.step()
    return (lambda t: T.reshape(mlp(t), (-1,))), X


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = dict(synthetic_n=300, seeds=[1, 2], d_tab=8, d_state=2, image_widths=[2, 4, 4], d_img=8, d_proj=8,
            d_out=8, pretrain_epochs=2, warmup_epochs=1, epochs=3, unimodal_epochs=3, ig_steps=16,
            ig_max_samples=8, batch_size=64)


def tiny_config(**kw):
    from amffuse.config import RunConfig

    return RunConfig(**dict(TINY, **kw))


@pytest.fixture(scope="session")
def tiny_data():
    from amffuse.data import synthetic_dataset

    return synthetic_dataset(300, seed=0)


@pytest.fixture(scope="session")
def tiny_pretrain(tiny_data, tmp_path_factory):
    from amffuse.training import run_pretrain

    out = tmp_path_factory.mktemp("pre")
    return run_pretrain(tiny_config(stage="pretrain"), tiny_data, out_dir=out)


# acceptance criteria report: criterion -> (passed, detail), printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
