import os
import sys
import time
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")

SESSION_START = time.perf_counter()
# one "criterion N: PASS|FAIL detail" line per acceptance criterion
VERDICTS: dict = {}


def pytest_collection_modifyitems(config, items):
    # acceptance tests run last so the suite-runtime check sees everything else
    items.sort(key=lambda item: item.nodeid.startswith("tests/test_acceptance.py"))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[key])


@pytest.fixture(scope="session")
def desk_lab(tmp_path_factory):
    """The desk lab, trained from scratch unless ADVLAB_DESK_CACHE names a cache directory."""
    from advlab.desk import DeskConfig, build_desk_lab

    cache = os.environ.get("ADVLAB_DESK_CACHE") or tmp_path_factory.mktemp("desk")
    return build_desk_lab(DeskConfig(), cache_dir=cache), Path(cache)
