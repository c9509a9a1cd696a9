"""Central finite-difference checks against reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class ParamCheck:
    name: str
    checked: int
    max_abs_err: float
    rel_err: float
    finite: bool
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def worst(self) -> float:
        return max((p.rel_err for p in self.params), default=0.0)

    def summary(self) -> str:
        lines = [f"{'param':<40} {'n':>5} {'max_abs':>10} {'rel':>10}  ok"]
        for p in self.params:
            flag = "yes" if p.passed else ("NONFINITE" if not p.finite else "NO")
            lines.append(f"{p.name:<40} {p.checked:>5} {p.max_abs_err:10.2e} {p.rel_err:10.2e}  {flag}")
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` gradients of the scalar ``f()`` with central differences.

    The step for element ``x_i`` is ``h * (|x_i| + 1)``.  Relative error per
    parameter is ``max|g_ad - g_fd| / (max|g_fd| + 1e-12)``.  With
    ``max_elements`` set, that many entries per parameter are sampled
    (seeded) instead of sweeping every entry.
    """
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_elements is not None and n > max_elements:
            idx = np.sort(rng.choice(n, size=max_elements, replace=False))
        else:
            idx = np.arange(n)
        g_fd = np.empty(idx.size)
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                step = h * (abs(orig) + 1.0)
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                g_fd[j] = (fp - fm) / (2.0 * step)
        g_ad = analytic[name].reshape(-1)[idx]
        finite = bool(np.all(np.isfinite(g_fd)) and np.all(np.isfinite(g_ad)))
        abs_err = float(np.max(np.abs(g_ad - g_fd))) if idx.size else 0.0
        rel = abs_err / (float(np.max(np.abs(g_fd))) + 1e-12) if idx.size else 0.0
        if not finite:
            abs_err = rel = float("nan")
        report.params.append(ParamCheck(name, int(idx.size), abs_err, rel, finite, finite and rel < tol))
    return report
