import numpy as np
import pytest

from ewavit.vit import ViTConfig


def tiny_config(**kw) -> ViTConfig:
    base = dict(image_size=8, patch_size=4, in_chans=3, d_model=8, n_heads=2, depth=4,
                mlp_ratio=2.0, n_classes=5)
    base.update(kw)
    return ViTConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
