"""Central-difference gradient checking.

Used by the test suite as the independent oracle for every differentiable
primitive and for whole models.  Coordinates whose perturbation flips a
relu mask or a pooling argmax sit on a kink of the function; they are
redrawn rather than compared, since no derivative exists there.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, grad, no_grad, trace_kinks


@dataclass
class Probe:
    param: int
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return relative_error(self.analytic, self.numeric)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _same_branches(t1: list, t2: list) -> bool:
    return len(t1) == len(t2) and all(np.array_equal(a, b) for a, b in zip(t1, t2))


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_coords: int,
    rng: np.random.Generator,
    step: float = 1e-5,
    max_redraws: int = 20,
    stratify: bool = False,
) -> list[Probe]:
    """Compare reverse-mode gradients of ``fn()`` against central differences.

    ``n_coords`` coordinates are drawn without replacement, uniformly over all
    elements of all ``params``, or round-robin over the tensors when
    ``stratify`` is set so that small tensors (biases, norms) are covered.
    """
    analytic = grad(fn(), list(params))
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    if stratify:
        per = [offsets[i] + rng.permutation(n)[: 4 * n_coords] for i, n in enumerate(sizes)]
        depth = max(len(q) for q in per)
        order = [q[d] for d in range(depth) for q in per if d < len(q)]
    else:
        order = rng.permutation(int(sizes.sum()))
    with no_grad(), trace_kinks() as base_trace:
        fn()
    base_trace = list(base_trace)

    probes: list[Probe] = []
    redraws = 0
    for flat in order:
        if len(probes) >= n_coords:
            break
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[pi]
        index = np.unravel_index(int(flat - offsets[pi]), p.shape)
        orig = p.data[index].copy()
        with no_grad():
            p.data[index] = orig + step
            with trace_kinks() as t_plus:
                f_plus = fn().item()
            p.data[index] = orig - step
            with trace_kinks() as t_minus:
                f_minus = fn().item()
            p.data[index] = orig
        if not (_same_branches(t_plus, base_trace) and _same_branches(t_minus, base_trace)):
            redraws += 1
            if redraws > max_redraws * n_coords:
                raise RuntimeError("too many coordinates sit on nonsmooth points")
            continue
        numeric = (f_plus - f_minus) / (2 * step)
        probes.append(Probe(pi, tuple(int(i) for i in index), float(analytic[pi][index]), numeric))
    return probes


def max_rel_error(probes: Sequence[Probe]) -> float:
    return max(p.rel_error for p in probes)
