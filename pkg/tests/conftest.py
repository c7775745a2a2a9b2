from __future__ import annotations

import numpy as np
import pytest

from uprlhf import numerics as nx
from uprlhf.model import BackboneConfig, PolicyModel

ACCEPTANCE_LINES: list[str] = []


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (``x`` is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    """Norm-wise relative error ``|a - b| / (|a| + |b|)``; 0 when both vanish."""
    a, b = np.ravel(a), np.ravel(b)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom < 1e-14 else float(np.linalg.norm(a - b) / denom)


def tiny_config() -> BackboneConfig:
    return BackboneConfig(vocab_size=18, embed_dim=8, heads=2, ff_width=12, layers=1, max_seq_len=20)


@pytest.fixture
def tiny_policy() -> PolicyModel:
    return PolicyModel.initialize(tiny_config(), nx.make_rng(7, "test", "policy"))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
