import numpy as np
import pytest

from avsqa.dsp import Waveform


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def harmonic_fixture(seed: int, n: int = 32000) -> Waveform:
    """AM harmonic tone with a silent lead-in, roughly speech-like."""
    r = np.random.default_rng(seed)
    t = np.arange(n) / 16000
    f0 = r.uniform(100, 200)
    x = sum(np.sin(2 * np.pi * f0 * k * t + r.uniform(0, 6.28)) / k for k in range(1, 25))
    env = (0.5 + 0.5 * np.sin(2 * np.pi * r.uniform(2, 6) * t)) ** 2
    env[t < 0.15] = 0.0
    x = x * env
    return Waveform(0.4 * x / np.max(np.abs(x)))


TOY_CORPUS = dict(n_train_speakers=5, n_test_speakers=1, duration_s=(1.0, 1.2),
                  snr_grid=(-10.0, -5.0, 5.0, 10.0), validation_fraction=0.2, master_seed=5)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    """16 train / 4 validation / 8 test records of about one second each."""
    from avsqa.datagen import CorpusConfig, build_corpus

    out = tmp_path_factory.mktemp("toy")
    build_corpus(CorpusConfig(**TOY_CORPUS), out)
    return out / "manifest.jsonl"


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
