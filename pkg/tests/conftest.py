import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from taskdb.engine import Engine, EngineConfig, seed_demo  # noqa: E402


def make_demo_engine(path, **config):
    eng = Engine(EngineConfig(data_dir=Path(path), **config))
    seed_demo(eng)
    return eng


@pytest.fixture(scope="session")
def demo_dir(tmp_path_factory):
    """A seeded data directory, built once and reopened by each engine fixture."""
    path = tmp_path_factory.mktemp("demo")
    make_demo_engine(path)
    return path


@pytest.fixture(scope="session")
def demo_engine(demo_dir):
    """Shared read-mostly engine: queries only, no catalog or task changes."""
    return Engine(EngineConfig(data_dir=demo_dir))


@pytest.fixture
def fresh_engine(tmp_path):
    return make_demo_engine(tmp_path / "data")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
