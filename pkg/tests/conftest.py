import numpy as np
import pytest

from texguard import tensor as T

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def f64():
    with T.high_precision():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


TINY_CONFIG = """\
# small enough to run the whole pipeline in a few seconds
seed = 3
corpus.n_train = 12
corpus.n_test = 4
corpus.size = 32
texture.window = 7
classifier.local_epochs = 1
classifier.global_epochs = 1
surrogate.epochs = 1
defense.epochs = 1
defense.batch_size = 6
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG + f"paths.out = {tmp_path / 'run'}\n")
    return path
