import numpy as np
import pytest
import torch


def fd_directional(loss_fn, params, direction, h=1e-4):
    """Central difference of loss_fn along ``direction`` (list matching params)."""
    with torch.no_grad():
        for p, v in zip(params, direction):
            p.add_(h * v)
        up = float(loss_fn())
        for p, v in zip(params, direction):
            p.sub_(2 * h * v)
        down = float(loss_fn())
        for p, v in zip(params, direction):
            p.add_(h * v)
    return (up - down) / (2 * h)


def grad_check(loss_fn, params, seed=0, h=1e-4, n_dirs=3):
    """Largest relative error between reverse-mode and finite-difference directional derivatives."""
    params = list(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        direction = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        norm = sum(float((v * v).sum()) for v in direction) ** 0.5
        direction = [v / norm for v in direction]
        analytic = sum(float((g * v).sum()) for g, v in zip(grads, direction))
        numeric = fd_directional(loss_fn, params, direction, h)
        worst = max(worst, abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-12))
    return worst


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


# criterion lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
