import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from neuroretrieve.synthdata import SynthConfig, generate, write_dataset

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """4 classes x 5 pairs, 6 channels, 64 samples; written once per session."""
    cfg = SynthConfig(n_classes=4, per_class=5, V=6, T=64, fs=128.0, snr=2.0, n_sets=5, seed=3)
    out = tmp_path_factory.mktemp("tiny")
    write_dataset(generate(cfg), out, cfg)
    return out


@pytest.fixture
def tiny_overrides(tiny_dataset):
    """Run-config overrides for fast training on ``tiny_dataset``."""
    return {
        "data": str(tiny_dataset),
        "epochs": 2,
        "batch_size": 4,
        "encoder.M": 4,
        "encoder.D": 2,
        "encoder.out_dim": 8,
        "joint_dim": 16,
        "visual.dim": 8,
        "pretrain.window": 32,
        "pretrain.stride": 16,
        "pretrain.epochs": 2,
    }


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the boolean."""

    def record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {label}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
