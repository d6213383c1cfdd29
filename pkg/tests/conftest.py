"""Session hooks: sum-to-zero audit of every converged partnered fit and the
acceptance summary printed at the end of the run."""
import numpy as np
import pytest

from pqlmm import solver

SUM_TO_ZERO_AUDIT = []


@pytest.fixture(autouse=True, scope="session")
def _audit_sum_to_zero():
    original = solver.fit_inner

    def audited(design, work, family, config=None, init=None):
        fit = original(design, work, family, config, init)
        if fit.converged and design.partnered:
            tol = (config or solver.SolverConfig()).grad_tol
            SUM_TO_ZERO_AUDIT.append((float(np.abs(fit.b.sum(axis=0)).max()), tol))
        return fit

    solver.fit_inner = audited
    yield
    solver.fit_inner = original


def pytest_terminal_summary(terminalreporter):
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    if not SUM_TO_ZERO_AUDIT:
        return
    worst = max(s / t for s, t in SUM_TO_ZERO_AUDIT)
    status = "PASS" if worst <= 10 else "FAIL"
    terminalreporter.write_line(
        f"sum-to-zero audit: {len(SUM_TO_ZERO_AUDIT)} converged partnered fits, "
        f"worst |sum b|/grad_tol = {worst:.3g} [{status}]")


def pytest_sessionfinish(session, exitstatus):
    if SUM_TO_ZERO_AUDIT and max(s / t for s, t in SUM_TO_ZERO_AUDIT) > 10 and exitstatus == 0:
        session.exitstatus = 1

ACCEPTANCE = []


def record_criterion(number, ok, detail):
    ACCEPTANCE.append((number, bool(ok), detail))
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
