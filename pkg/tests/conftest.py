import time

import numpy as np
import pytest

from refmpc import certify as cf
from refmpc import synthesis as syn
from refmpc.bench.models import bicycle_model, cstr_model

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


class Bundle:
    def __init__(self, **kw):
        self.__dict__.update(kw)


@pytest.fixture(scope="session")
def cstr():
    model = cstr_model()
    t0 = time.perf_counter()
    ing = syn.synthesize_grid_discrete(model, np.eye(3), 10.0 * np.eye(1), 0.1)
    t_syn = time.perf_counter() - t0
    rep = cf.certify_alpha(ing, model, cf.SamplingSpec(per_pair=100))
    return Bundle(model=model, ing=ing, rep=rep, synthesis_time=t_syn)


@pytest.fixture(scope="session")
def car():
    model = bicycle_model()
    ing = syn.synthesize_grid_discrete(model, np.eye(5), np.eye(2), 0.1)
    rep = cf.certify_alpha(ing, model, cf.SamplingSpec(per_pair=20))
    first = cf.robust_certificate(ing, model, 1.82e-5, 10, rep)
    robust = cf.robust_certificate(ing, model, first["w_bound"], 10, rep)
    return Bundle(model=model, ing=ing, rep=rep, robust=robust)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
