import numpy as np
import pytest

from gfsl.data import SyntheticSpec, gen_synthetic
from gfsl.model import ModelConfig, init_state


def toy_state(variant="castle", d=6, num_bases=4, num_seen=3, input_dim=5, hidden=0, seed=0, **cfg):
    config = ModelConfig(embed_dim=d, hidden_dim=hidden, num_bases=num_bases, variant=variant, **cfg)
    m = init_state(input_dim, num_seen, config, seed)
    rng = np.random.default_rng(seed + 100)
    # larger projections than the init so attention weights are far from uniform
    m.proj_u = rng.normal(size=(d, d))
    m.proj_v = rng.normal(size=(d, d))
    m.bases = rng.normal(size=(num_bases, d))
    m.theta = rng.normal(size=(d, num_seen))
    return m


@pytest.fixture(scope="session")
def small_ds():
    spec = SyntheticSpec(num_domains=3, classes_per_domain=6, instances_per_class=30, feature_dim=8,
                         num_seen=10, num_unseen_val=3, seed=3)
    return gen_synthetic(spec)


@pytest.fixture(scope="session")
def acceptance_ds():
    return gen_synthetic(SyntheticSpec(seed=0))


ACCEPTANCE_LINES = {}


class Verdict:
    """Collects one pass/fail line per acceptance criterion."""

    def __init__(self, key):
        self.key = key
        self.recorded = False

    def check(self, ok, detail):
        ACCEPTANCE_LINES[self.key] = f"criterion {self.key}: {'PASS' if ok else 'FAIL'}  {detail}"
        self.recorded = True
        print(ACCEPTANCE_LINES[self.key])
        assert ok, detail


@pytest.fixture
def verdict(request):
    key = request.node.get_closest_marker("criterion").args[0]
    v = Verdict(key)
    yield v
    if not v.recorded:
        ACCEPTANCE_LINES[key] = f"criterion {key}: FAIL  (raised before a verdict was recorded)"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(key): acceptance criterion checked by the test")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(str(k).split(".")[0]), str(k))):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
