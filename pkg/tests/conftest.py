import numpy as np
import pytest
import torch

FD_STEP = 1e-6
REL_TOL = 1e-4
# gradients this small on both sides count as zero (dead ReLU units)
ZERO_FLOOR = 1e-8


def central_difference(fn, tensor, index, step=FD_STEP):
    flat = tensor.data.view(-1)
    orig = flat[index].item()
    with torch.no_grad():
        flat[index] = orig + step
        up = fn().item()
        flat[index] = orig - step
        down = fn().item()
        flat[index] = orig
    return (up - down) / (2 * step)


def relative_error(a, b):
    scale = max(abs(a), abs(b))
    if scale < ZERO_FLOOR:
        return 0.0
    return abs(a - b) / scale


def fd_check(fn, tensor, n_probes=10, seed=0, step=FD_STEP):
    """Compare autograd against central differences at random entries of ``tensor``.

    ``fn`` must return a float64 scalar computed from ``tensor``. Returns the
    list of ``(analytic, numeric, rel_err)`` per probe.
    """
    tensor.grad = None
    fn().backward()
    grad = tensor.grad.detach().clone().view(-1)
    rng = np.random.default_rng(seed)
    # probe entries with a live gradient when possible
    live = torch.nonzero(grad.abs() > 1e-6).flatten().numpy()
    pool = live if len(live) >= n_probes else np.arange(grad.numel())
    out = []
    for idx in rng.choice(pool, size=n_probes, replace=len(pool) < n_probes):
        num = central_difference(fn, tensor, int(idx), step)
        ana = grad[int(idx)].item()
        out.append((ana, num, relative_error(ana, num)))
    return out


@pytest.fixture
def fd():
    return fd_check


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
