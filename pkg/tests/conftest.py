import functools
import json
import time
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@functools.lru_cache(maxsize=None)
def _golden(name, root):
    from torus_sgm.cli import run

    t0 = time.perf_counter()
    code, path = run(CONFIGS / f"{name}.toml", out=Path(root) / name)
    return code, json.loads(Path(path).read_text()), time.perf_counter() - t0


@pytest.fixture(scope="session")
def golden_root(tmp_path_factory):
    return tmp_path_factory.mktemp("golden")


@pytest.fixture(scope="session")
def golden(golden_root):
    """Run a pinned config once per session; returns (exit status, report, seconds)."""
    return lambda name: _golden(name, str(golden_root))


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
