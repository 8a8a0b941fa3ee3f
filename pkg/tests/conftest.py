import numpy as np
import pytest

from utopic.network import ModelConfig


def tiny_model_config(**kw) -> ModelConfig:
    """Small network for gradient and plumbing tests."""
    base = dict(feat_dim=8, d_t=8, n_iter=1, k_samples=4, k_local=4, extractor_channels=(6, 6),
                descriptor_scales=(4,), n_completion=4, ffn_mult=1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            for key, value in rep.user_properties:
                if key == "criterion":
                    num, text = value
                    lines.append((num, f"criterion {num:2d}: {'PASS' if rep.passed else 'FAIL'}  {text}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
