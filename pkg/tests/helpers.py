"""Shared test utilities."""

import torch


def randomize_parameters(module: torch.nn.Module, std: float = 0.05, seed: int = 0) -> None:
    """Overwrite every parameter with small random values (undoes zero inits)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def max_relative_gradient_error(
    loss_fn,
    parameters: list[torch.nn.Parameter],
    coords_per_param: int = 3,
    h: float = 1e-4,
    seed: int = 0,
) -> float:
    """Compare autograd gradients against central finite differences.

    Samples a few coordinates per parameter tensor; assumes float64 modules
    and a deterministic loss_fn.
    """
    gen = torch.Generator().manual_seed(seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, parameters, allow_unused=True)
    worst = 0.0
    for p, g in zip(parameters, grads):
        n = p.numel()
        idx = torch.randint(0, n, (min(coords_per_param, n),), generator=gen)
        for i in idx.tolist():
            flat = p.data.reshape(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(loss_fn().detach())
            flat[i] = orig - h
            down = float(loss_fn().detach())
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = 0.0 if g is None else float(g.reshape(-1)[i])
            denom = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
