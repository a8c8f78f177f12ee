import numpy as np
import pytest

from fedrisk.data import MARKETS, GeneratorConfig, SampleBatch, generate
from fedrisk.model import ModelConfig
from fedrisk.numeric import SeededRng

SMALL_MODEL = ModelConfig(d_static=6, d_temporal=2, seq_len=4, d_embed=3, d_hidden=4)


def random_batch(cfg: ModelConfig, n: int, rng: SeededRng, task_noise=True) -> SampleBatch:
    risk = rng.random(n)
    return SampleBatch(
        ids=np.arange(n),
        static=rng.normal((n, cfg.d_static)),
        sequence=rng.normal((n, cfg.seq_len, cfg.d_temporal)),
        label=(risk >= 0.5).astype(np.float64),
        risk_score=risk,
        market=np.array([MARKETS[i % len(MARKETS)] for i in range(n)]),
        systemic=(rng.random(n) < 0.1).astype(np.int64),
    )


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, one coordinate at a time."""
    g = np.empty_like(x)
    for i in range(x.size):
        up = x.copy()
        up[i] += h
        down = x.copy()
        down[i] -= h
        g[i] = (f(up) - f(down)) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))


@pytest.fixture
def small_model():
    return SMALL_MODEL


@pytest.fixture(scope="session")
def small_records():
    return generate(GeneratorConfig(n=600, seed=3, d_static=6, seq_len=4, d_temporal=2))


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
