import numpy as np
import pytest

from gcfit import model as m
from gcfit.simulate import SimOptions, simulate_conditioned


@pytest.fixture(scope="session")
def space():
    return m.load_type_space()


@pytest.fixture(scope="session")
def nm_truth():
    return m.Params(m.SigmoidParams(1.3, 1.0, -1.1, 0.5), 0.5, 20.0, m.load_gamma(), rho=(0.1,))


@pytest.fixture(scope="session")
def nm_trees(nm_truth, space):
    rng = np.random.default_rng(20240601)
    opts = SimOptions(t_total=15.0, root_state=4)
    return [simulate_conditioned(nm_truth, space, opts, rng=rng)[0] for _ in range(12)]


# -- acceptance report -----------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()
N_CRITERIA = 12


@pytest.fixture
def acceptance(request):
    """``record(k, ok, detail)`` stores the outcome of acceptance criterion
    ``k`` for the end-of-run report and returns ``ok``."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(k: int, ok: bool, detail: str) -> bool:
        results[k] = (bool(ok), detail)
        print(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, None)
    if results is None:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, N_CRITERIA + 1):
        if k in results:
            ok, detail = results[k]
            terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {k:2d}: FAIL  (not run or raised before reporting)")
