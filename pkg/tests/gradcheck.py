"""Central-difference gradient comparison used across the test suite."""

import torch

EPS = 1e-4


def numeric_grad(fn, x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    g = torch.zeros_like(x)
    flat = x.data.view(-1)
    gf = g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(fn())
        flat[i] = old - eps
        lo = float(fn())
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def relative_error(a: torch.Tensor, n: torch.Tensor) -> float:
    denom = max(a.norm().item(), n.norm().item(), 1e-12)
    return (a - n).norm().item() / denom


def check(fn, tensors, eps: float = EPS) -> float:
    """Largest relative error between autograd and central differences over ``tensors``."""
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for t, a in zip(tensors, grads):
            a = torch.zeros_like(t) if a is None else a
            worst = max(worst, relative_error(a, numeric_grad(fn, t, eps)))
    return worst
