"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from thermofuse.engine.tensor import Parameter, Tensor, no_grad


@dataclass
class Probe:
    param: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), 1e-8)


def grad_check(forward: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5,
               n_probe: int = 64, rng: np.random.Generator | None = None,
               terms: Callable[[], np.ndarray] | None = None, return_probes: bool = False):
    """Max relative error between backprop and central differences.

    ``forward`` rebuilds the scalar loss from the current parameter values.
    Up to ``n_probe`` coordinates per parameter are probed (all when fewer).
    When ``terms`` is given it must return the per-element contributions that
    sum to the loss; the difference is then taken term by term before summing,
    which removes most of the cancellation error for tiny gradients.
    """
    evaluate = terms if terms is not None else (lambda: forward().data)
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    forward().backward()
    analytic = [p.grad.copy() for p in params]
    probes = []
    for p, ga in zip(params, analytic):
        size = p.data.size
        flat = np.arange(size) if size <= n_probe else rng.choice(size, n_probe, replace=False)
        for f in flat:
            idx = np.unravel_index(f, p.shape)
            orig = p.data[idx]
            with no_grad():
                p.data[idx] = orig + eps
                up = np.asarray(evaluate(), dtype=np.float64)
                p.data[idx] = orig - eps
                down = np.asarray(evaluate(), dtype=np.float64)
            p.data[idx] = orig
            numeric = float(np.sum(up - down)) / (2 * eps)
            probes.append(Probe(p.name, tuple(int(i) for i in idx), float(ga[idx]), numeric))
    for p in params:
        p.zero_grad()
    worst = max((pr.rel_error for pr in probes), default=0.0)
    return (worst, probes) if return_probes else worst
