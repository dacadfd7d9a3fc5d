import numpy as np
import pytest
import torch

torch.set_num_threads(1)

FD_EPS = 1e-5
FD_TOL = 1e-4
# central differences cannot resolve gradients below ~1e-10 (round-off / eps);
# analytically-zero entries (e.g. attention key biases) are compared against this floor
FD_FLOOR = 1e-5


def fd_max_rel_error(loss_fn, tensors, samples_per_tensor=12, seed=0, eps=FD_EPS):
    """Largest relative error between autograd and central differences.

    ``loss_fn()`` must rebuild the scalar loss from the current values of
    ``tensors`` (double precision leaves with requires_grad). A random subset
    of entries per tensor is probed.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            idx = rng.choice(flat.numel(), size=min(samples_per_tensor, flat.numel()), replace=False)
            for i in idx:
                old = float(flat[i])
                flat[i] = old + eps
                up = float(loss_fn())
                flat[i] = old - eps
                down = float(loss_fn())
                flat[i] = old
                num = (up - down) / (2 * eps)
                ana = float(g.reshape(-1)[i])
                denom = max(abs(num), abs(ana), FD_FLOOR)
                worst = max(worst, abs(num - ana) / denom)
    return worst


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def record_acceptance(number: int, name: str, ok: bool, detail: str) -> None:
    _ACCEPTANCE[number] = (name, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        name, ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} ({name}): {'PASS' if ok else 'FAIL'} - {detail}")
