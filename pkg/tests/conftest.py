import numpy as np
import pytest

from smtgpr.basis import OrthogonalBasis
from smtgpr.model import ModelConfig


def random_orthonormal(rng, t, p):
    q, _ = np.linalg.qr(rng.standard_normal((t, p)))
    return q


def random_instance(rng, n=None, t=None, p=None, sigma2=None):
    """Small random S-MTGPR problem: (config, basis, raw, x, y)."""
    n = n or int(rng.integers(3, 11))
    t = t or int(rng.integers(2, 9))
    p = p or int(rng.integers(1, t + 1))
    sigma2 = sigma2 if sigma2 is not None else float(rng.choice([1e-3, 1.0, 10.0]))
    cfg = ModelConfig(p=p)
    raw = rng.uniform(-1.0, 0.5, size=cfg.n_params)
    raw[-1] = np.log(sigma2)
    x = rng.standard_normal((n, 2))
    y = rng.standard_normal((n, t))
    basis = OrthogonalBasis(random_orthonormal(rng, t, p), np.ones(p), np.zeros(t), float(t))
    return cfg, basis, raw, x, y


def central_difference(f, raw, h=1e-3):
    """Five-point central difference; round-off stays small when ``|f|`` is large."""
    raw = np.asarray(raw, dtype=np.float64)
    g = np.empty_like(raw)
    for i in range(raw.size):
        e = np.zeros_like(raw)
        e[i] = h
        g[i] = (f(raw - 2 * e) - 8 * f(raw - e) + 8 * f(raw + e) - f(raw + 2 * e)) / (12 * h)
    return g


def gradient_ok(g, fd, rel=1e-5, floor=1e-8):
    return bool(np.all(np.abs(g - fd) <= np.maximum(rel * np.abs(fd), floor)))


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance verdicts, echoed in the terminal summary so they survive output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
