"""Central finite-difference check of autograd gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np
import torch
from torch import nn

from .layers import Dropout


@dataclass
class GradCheckReport:
    errors: Dict[str, float] = field(default_factory=dict)
    eps: float = 1e-6
    tol: float = 1e-4
    failures: List[str] = field(default_factory=list)
    floor: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_error < self.tol

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        lines = [f"gradcheck {status}: max rel err {self.max_error:.3e} (eps={self.eps:g}, tol={self.tol:g})"]
        lines += [f"  {n}: {e:.3e}" for n, e in self.errors.items()]
        lines += [f"  failure: {f}" for f in self.failures]
        return "\n".join(lines)


def gradient_check(
    network: nn.Module,
    loss_fn: Callable,
    x,
    eps: float = 1e-6,
    tol: float = 1e-4,
    samples: int = 32,
    seed: int = 0,
    floor: float = 1e-6,
    check_inputs: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients with ``(L(t+eps) - L(t-eps)) / 2eps``.

    ``loss_fn`` receives the network output (``network(*x)`` when ``x`` is a
    tuple) and returns a scalar. Up to ``samples`` elements per parameter are
    probed, chosen by a seeded permutation. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``, where ``floor`` is raised to the
    rounding level of the difference quotient, ``1e4 * machine_eps * |L| / eps``,
    so gradients that are zero by construction do not report rounding noise. Dropout is switched off for the check.
    ``check_inputs`` also probes floating-point inputs (named ``input.k``), which
    is how parameter-free layers are checked.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    params = [(n, p) for n, p in network.named_parameters() if p.requires_grad]
    args = x if isinstance(x, tuple) else (x,)
    if check_inputs:
        args = tuple(a.detach().clone().requires_grad_(True) if torch.is_tensor(a) and a.is_floating_point() else a for a in args)
        params += [(f"input.{k}", a) for k, a in enumerate(args) if torch.is_tensor(a) and a.requires_grad]
    report = GradCheckReport(eps=eps, tol=tol)
    if not params:
        return report
    for n, p in params:
        if p.dtype != torch.float64:
            raise TypeError(f"gradient check needs float64 parameters ({n} is {p.dtype})")

    dropouts = [m for m in network.modules() if isinstance(m, Dropout)]
    was_enabled = [d.enabled for d in dropouts]
    for d in dropouts:
        d.enabled = False

    def loss() -> torch.Tensor:
        return loss_fn(network(*args))

    network.zero_grad()
    for _, p in params:
        p.grad = None
    value = loss()
    value.backward()
    floor = max(floor, 1e4 * np.finfo(np.float64).eps * abs(value.item()) / eps)
    report.floor = floor
    analytic = {n: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for n, p in params}

    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for n, p in params:
            g = analytic[n].reshape(-1)
            if not torch.isfinite(g).all():
                report.failures.append(f"{n}: non-finite analytic gradient")
                continue
            flat = p.data.view(-1)
            idx = rng.permutation(flat.numel())[:samples]
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                lp = loss().item()
                flat[i] = orig - eps
                lm = loss().item()
                flat[i] = orig
                num = (lp - lm) / (2 * eps)
                if not np.isfinite(num):
                    report.failures.append(f"{n}[{i}]: non-finite numerical gradient")
                    break
                a = g[i].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
            report.errors[n] = worst
    for d, on in zip(dropouts, was_enabled):
        d.enabled = on
    return report
