import functools
from pathlib import Path

import pytest

from preimpact.environment import build_scenario
from preimpact.simulation import simulate

CONFIG_DIR = Path(__file__).resolve().parents[1] / "src" / "preimpact" / "configs"


@functools.lru_cache(maxsize=None)
def _run(kind, items):
    return simulate(build_scenario(kind, dict(items)))


def run(kind, **overrides):
    """Simulate a scenario; identical requests share one cached trace.

    Keyword names use '__' for the dots of config keys.
    """
    items = tuple(sorted((k.replace("__", "."), v) for k, v in overrides.items()))
    return _run(kind, items)


@pytest.fixture(scope="session")
def config_dir():
    return CONFIG_DIR
