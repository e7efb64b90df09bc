import pytest

from seqbalance.workload import ModelShape, WorkloadModel

_ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    def record(number, name, passed, detail=""):
        _ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name}  {detail}".rstrip())

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def flux():
    return WorkloadModel()


@pytest.fixture
def tiny_model():
    # 4 heads of width 2; gamma 1 keeps integer-valued workloads
    return WorkloadModel(ModelShape(d_model=8, n_heads=4, d_head=2, n_blocks=1), gamma=1.0, k=1.0)
