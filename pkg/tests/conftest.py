import numpy as np
import pytest
import torch

from boxrefine.data import SyntheticSpec, generate_synthetic_dataset
from boxrefine.model import ModelConfig


@pytest.fixture(scope="session")
def tiny_sequences():
    spec = SyntheticSpec(num_sequences=3, seq_length=8, image_size=(96, 96), seed=7)
    return generate_synthetic_dataset(spec)


@pytest.fixture
def tiny_config():
    return ModelConfig(stage_channels=(4, 8, 8, 8), input_size=64, fused_channels=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def central_difference(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``f`` w.r.t. ``x`` (float64), one coordinate at a time."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), 1e-12)
    return num / den


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
