"""Central finite-difference probes for scalar losses (run in float64)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch


@dataclass
class Probe:
    tensor: int
    index: int
    analytic: float
    numeric: float

    def rel_error(self, floor: float = 1e-8) -> float:
        scale = max(abs(self.analytic), abs(self.numeric), floor)
        return abs(self.analytic - self.numeric) / scale


def probe_gradients(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                    n_probe: int = 20, eps: float = 1e-6, seed: int = 0) -> list[Probe]:
    """Compare autograd against (f(p+eps) - f(p-eps)) / 2eps at random entries.

    ``params`` must be float64 leaves with ``requires_grad``; ``loss_fn``
    recomputes the loss from their current values. Entries whose analytic
    gradient is exactly zero are skipped while nonzero ones remain, so the
    probes exercise the paths that actually carry gradient.
    """
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("gradient probes need float64 parameters")
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.detach().clone().reshape(-1) for p in params]

    candidates = [(t, i) for t, g in enumerate(grads) for i in torch.nonzero(g).flatten().tolist()]
    if len(candidates) < n_probe:
        candidates += [(t, i) for t, g in enumerate(grads) for i in range(g.numel()) if g[i] == 0]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=min(n_probe, len(candidates)), replace=False)

    out = []
    with torch.no_grad():
        for k in sorted(picks):
            t, i = candidates[k]
            flat = params[t].view(-1)
            orig = flat[i].item()
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            out.append(Probe(t, i, grads[t][i].item(), (up - down) / (2 * eps)))
    return out
