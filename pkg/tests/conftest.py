import pytest

from embedlab.feature import HashSpec
from embedlab.model import ToyModelConfig
from embedlab.synthgen import SignalConfig, TaskSpec, ZipfIdSpace, generate_dataset


@pytest.fixture(scope="session")
def tiny_dataset():
    """Six days of 600 examples over two small ID spaces and a conditional task."""
    spaces = (ZipfIdSpace("campaign", 400, 1.1, seed=1), ZipfIdSpace("advertiser", 100, 0.9, seed=2))
    tasks = (TaskSpec("click", 1.0), TaskSpec("checkout", 0.2, "click"))
    return generate_dataset(spaces, tasks, 6, 600, seed=0, signal=SignalConfig(calibration_examples=20_000))


@pytest.fixture
def tiny_model_config():
    return ToyModelConfig(tables=(HashSpec("campaign", 7), HashSpec("advertiser", 5, salt=1)),
                          tasks=("click", "checkout"), dim=4, continuous_dim=4, trunk=(8,), seed=3,
                          head_bias=(-1.4, -1.4))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
