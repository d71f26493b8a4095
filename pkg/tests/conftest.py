import pytest

from hed.config import NetConfig, TrainConfig
from hed.data import synth_corpus
from hed.train import make_samples, train

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def overfit_corpus():
    return synth_corpus(4, size=64, seed=0)


@pytest.fixture(scope="session")
def overfit_samples(overfit_corpus):
    return make_samples(overfit_corpus, NetConfig(), TrainConfig())


@pytest.fixture(scope="session")
def trained_ds_on(overfit_corpus, overfit_samples):
    return train(overfit_corpus, NetConfig(deep_supervision=True), TrainConfig(), samples=overfit_samples)


@pytest.fixture(scope="session")
def trained_ds_off(overfit_corpus, overfit_samples):
    return train(overfit_corpus, NetConfig(deep_supervision=False), TrainConfig(), samples=overfit_samples)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if passed else 'FAIL'}  {detail}")
