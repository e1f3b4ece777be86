import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hydrorecon.ingest import align, standardize, standardize_proxy  # noqa: E402
from hydrorecon.model import ModelSpec, ProxyDesign, TrueParameters, build_model_data, simulate  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


def small_truth(n_proxies=2, first_year=1800, start=1900, end=1949, **kw):
    designs = [
        ProxyDesign(f"p{j}", alpha=0.1 * j, beta1=0.8, beta2=0.1 * (-1) ** j, sigma=0.5, lag=(j % 3) - 1)
        for j in range(n_proxies)
    ]
    return TrueParameters(first_year=first_year, instrumental_start=start, instrumental_end=end,
                          proxies=designs, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_sim():
    return simulate(ModelSpec(), small_truth(), seed=7)


@pytest.fixture(scope="session")
def small_data(small_sim):
    hydro = standardize(small_sim.hydro)
    records = [standardize_proxy(r) for r in small_sim.proxies]
    grid, aligned = align(records, hydro)
    return hydro, aligned, build_model_data(hydro, aligned, grid)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
