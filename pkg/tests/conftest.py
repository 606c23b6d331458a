import numpy as np
import pytest

from dilvpr.model import ModelParams, Sample


def make_sample(i, raw, label, mission=1, split="train", gt=(0.0, 0.0), tag="VIS"):
    return Sample(i, np.asarray(raw, dtype=np.float64), int(label), gt, mission, tag, split)


def random_params(rng, d_in=3, dim=4, num_classes=5, scale=1.0):
    return ModelParams(
        rng.normal(size=(dim, d_in)) * scale,
        rng.normal(size=dim) * scale,
        rng.normal(size=(num_classes, dim)) * scale,
        rng.normal(size=num_classes) * scale,
    )


def random_samples(rng, n, d_in=3, num_classes=5, start=0, **kw):
    return [make_sample(start + i, rng.normal(size=d_in), rng.integers(num_classes), **kw) for i in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
