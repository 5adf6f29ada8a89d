import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from metaprompt.backbone import init_backbone  # noqa: E402
from metaprompt.taskgen import generate_task  # noqa: E402


@pytest.fixture(scope="session")
def backbone():
    return init_backbone(32, 2, 64, 7)


@pytest.fixture(scope="session")
def small_backbone():
    return init_backbone(8, 2, 64, 3)


@pytest.fixture(scope="session")
def cls_task(backbone):
    return generate_task("classification", None, seed=0, family_seed=0, vocab=backbone.vocab)


@pytest.fixture(scope="session")
def qa_task(backbone):
    return generate_task("qa_span", None, seed=0, family_seed=0, vocab=backbone.vocab)


@pytest.fixture(scope="session")
def trans_task(backbone):
    return generate_task("transformation", None, seed=0, family_seed=0, vocab=backbone.vocab)


def pytest_terminal_summary(terminalreporter):
    import verdicts

    if verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts.LINES):
            terminalreporter.write_line(verdicts.LINES[n])
