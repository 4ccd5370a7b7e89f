import numpy as np
import pytest

from aesthadapt.data import AugmentationConfig, ImageStore, Preprocessor, synth_generate
from aesthadapt.model import BackboneConfig, build_backbone
from aesthadapt.numerics import RandomSource

TINY = BackboneConfig(stage_channels=(2, 3, 4, 5), blocks_per_stage=1, input_size=8, head_width=6)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_model():
    return build_backbone(TINY, RandomSource(0))


@pytest.fixture
def tiny_model64():
    return build_backbone(TINY, RandomSource(0), dtype=np.float64)


@pytest.fixture(scope="session")
def small_corpus():
    return synth_generate(n_users=6, n_images=60, image_size=12, seed=3)


@pytest.fixture
def small_prep(small_corpus):
    aug = AugmentationConfig(resize_to=10, crop_to=8)
    return Preprocessor(ImageStore(None, small_corpus.images), aug)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance(capsys):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
