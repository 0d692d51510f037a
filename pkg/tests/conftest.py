import numpy as np
import pytest

from partpool.backbone import BackboneConfig
from partpool.model import ModelConfig, PartModel
from partpool.synth import GeneratorConfig, generate


# acceptance results, filled by tests/test_acceptance.py and printed at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_gen_config():
    return GeneratorConfig(seed=3, image_size=32, num_classes=3, train_per_class=4, test_per_class=2)


@pytest.fixture(scope="session")
def tiny_data(tiny_gen_config):
    return generate(tiny_gen_config)


def tiny_model(num_classes=3, dtype=np.float32, **kw) -> PartModel:
    bb = BackboneConfig(input_size=32, widths=[4, 6, 8], feature_channels=8, num_parts=5)
    return PartModel(ModelConfig(backbone=bb, num_classes=num_classes, **kw), dtype=dtype)
