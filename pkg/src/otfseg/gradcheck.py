"""Central finite-difference gradients, used to cross-check autograd."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import torch


def numerical_grad(
    f: Callable[[], torch.Tensor],
    x: torch.Tensor,
    h: float = 1e-6,
    indices: Optional[np.ndarray] = None,
) -> torch.Tensor:
    """d f / d x by central differences, perturbing ``x`` in place.

    ``f`` takes no arguments and reads ``x`` itself, so ``x`` can be a
    parameter buried in a module. Only ``indices`` (flat) are probed when
    given; other entries of the result stay zero.
    """
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    gflat = grad.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||)`` in the 2-norm."""
    a = a.detach().double().reshape(-1)
    b = b.detach().double().reshape(-1)
    scale = max(a.norm().item(), b.norm().item(), floor)
    return (a - b).norm().item() / scale
