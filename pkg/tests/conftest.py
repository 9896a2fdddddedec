import pytest

from a2d import data, nn

_ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def blob_data():
    ds = data.synthetic_blobs(4, 150, 12, 0.12, seed=3)
    return data.split(ds, 400, 200, seed=0)


@pytest.fixture(scope="session")
def blob_model(blob_data):
    train, _ = blob_data
    model, _ = nn.train(nn.mlp([12, 16, 4], seed=1), train, nn.TrainConfig(0.2, 30, 16, seed=2))
    return model


@pytest.fixture
def criterion_line():
    """Record the one-line verdict of an acceptance criterion; printed in the summary."""
    def record(number, ok, title, detail):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE_LINES[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(_ACCEPTANCE_LINES[number])
