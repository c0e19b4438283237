import numpy as np
import pytest
from hypothesis import settings

from fedpeft import experiment
from fedpeft.rng import Rng

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def desk_cfg():
    return experiment.desk_config()


@pytest.fixture(scope="session")
def desk_task(desk_cfg):
    return experiment.build_task(desk_cfg)


@pytest.fixture(scope="session")
def desk_base(desk_cfg):
    return experiment.pretrained_base(desk_cfg)


@pytest.fixture
def rng():
    return Rng(1234)


def random_images(cfg, n, rng):
    return rng.uniform(0.0, 1.0, size=(n, cfg.channels, cfg.image_size, cfg.image_size))


# acceptance criteria report ------------------------------------------------

CRITERIA = {}


def record_criterion(number, title, ok, detail=""):
    CRITERIA[number] = (title, bool(ok), detail)
    print(f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {title} {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, ok, detail = CRITERIA[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
