"""Central finite-difference checks of autograd gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch


@dataclass
class GradSample:
    name: str
    index: tuple
    analytic: float
    numeric: float

    def relative_error(self, floor: float = 1e-6) -> float:
        """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from dividing by ~0."""
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), floor)


def sample_parameters(params: Sequence[tuple[str, torch.Tensor]], n: int, rng: np.random.Generator) -> list[tuple[str, tuple]]:
    """``n`` (name, index) pairs drawn uniformly over all scalar entries."""
    sizes = np.array([p.numel() for _, p in params])
    flat = rng.choice(int(sizes.sum()), size=min(n, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for f in np.sort(flat):
        k = int(np.searchsorted(bounds, f, side="right"))
        local = int(f - (bounds[k - 1] if k else 0))
        name, p = params[k]
        out.append((name, tuple(int(i) for i in np.unravel_index(local, tuple(p.shape)))))
    return out


def check_gradients(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[tuple[str, torch.Tensor]],
    samples: Sequence[tuple[str, tuple]],
    step: float = 1e-3,
) -> list[GradSample]:
    """Compare autograd with ``(f(w + h) - f(w - h)) / 2h`` at each sampled entry.

    ``loss_fn`` must be deterministic (no dropout, fixed inputs).
    """
    lookup = dict(params)
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    grads = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for name, p in params}
    out = []
    with torch.no_grad():
        for name, idx in samples:
            p = lookup[name]
            orig = p[idx].item()
            p[idx] = orig + step
            up = loss_fn().item()
            p[idx] = orig - step
            down = loss_fn().item()
            p[idx] = orig
            out.append(GradSample(name, idx, grads[name][idx].item(), (up - down) / (2 * step)))
    return out
