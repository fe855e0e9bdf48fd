import numpy as np
import pytest
import torch


def fd_check(loss_fn, tensors, probes: int = 12, eps: float = 1e-6, rtol: float = 1e-4, seed: int = 0,
             floor: float = 1e-5):
    """Compare autograd gradients with central differences on random entries.

    ``tensors`` must be float64 leaves that ``loss_fn`` reads. The relative
    error uses a scale floor of ``floor`` since central differences cannot
    resolve gradients much below ``roundoff / eps``. Returns the worst
    relative error seen.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    worst = 0.0
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        for idx in rng.choice(flat.numel(), size=min(probes, flat.numel()), replace=False):
            old = flat[idx].item()
            with torch.no_grad():
                flat[idx] = old + eps
                up = loss_fn().item()
                flat[idx] = old - eps
                down = loss_fn().item()
                flat[idx] = old
            numeric = (up - down) / (2 * eps)
            analytic = g.view(-1)[idx].item()
            scale = max(abs(numeric), abs(analytic), floor)
            err = abs(numeric - analytic) / scale
            worst = max(worst, err)
            assert err < rtol, f"entry {idx}: analytic {analytic} vs numeric {numeric}"
    return worst


@pytest.fixture
def float64():
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(torch.float32)
