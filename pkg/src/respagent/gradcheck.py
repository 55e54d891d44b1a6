"""Central finite-difference verification of autograd gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

# below this magnitude both gradients count as zero for the relative error
ABS_FLOOR = 1e-6


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    n_coords: int = 64,
    h: float = 1e-6,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` must be a deterministic closure over ``params`` (no dropout,
    fresh RNG state each call). ``n_coords`` coordinates are drawn uniformly
    without replacement across all parameters (all of them when there are
    fewer). Run in float64.
    """
    params = [p for p in params if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            j = int(flat - offsets[k])
            view = params[k].view(-1)
            orig = view[j].item()
            view[j] = orig + h
            lp = loss_fn().item()
            view[j] = orig - h
            lm = loss_fn().item()
            view[j] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[k].reshape(-1)[j].item()
            denom = max(abs(an), abs(fd), ABS_FLOOR)
            worst = max(worst, abs(an - fd) / denom)
    return worst
