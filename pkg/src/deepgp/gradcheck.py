"""Central finite-difference comparison against reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad


@dataclass
class ParamReport:
    name: str
    size: int
    max_abs_err: float
    max_rel_err: float
    failures: int


@dataclass
class GradCheckReport:
    rtol: float
    atol: float
    params: list[ParamReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.failures == 0 for p in self.params)

    @property
    def max_abs_err(self) -> float:
        return max((p.max_abs_err for p in self.params), default=0.0)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def summary(self) -> str:
        lines = [f"{'parameter':<32} {'size':>5} {'max abs':>10} {'max rel':>10}  fails"]
        for p in self.params:
            lines.append(f"{p.name:<32} {p.size:>5} {p.max_abs_err:10.2e} {p.max_rel_err:10.2e}  {p.failures}")
        lines.append(("PASSED" if self.passed else "FAILED") + f" (rtol={self.rtol:g}, atol={self.atol:g})")
        return "\n".join(lines)


def numerical_gradient(fn: Callable[[dict], ad.Node], params: Mapping[str, np.ndarray], name: str, step: float) -> np.ndarray:
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    target = base[name]
    out = np.zeros_like(target)
    flat = target.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn({k: ad.constant(v) for k, v in base.items()}).value)
            flat[i] = orig - step
            down = float(fn({k: ad.constant(v) for k, v in base.items()}).value)
            flat[i] = orig
            out.reshape(-1)[i] = (up - down) / (2.0 * step)
    return out


def check_gradients(
    fn: Callable[[dict], ad.Node],
    params: Mapping[str, np.ndarray],
    step: float = 1e-6,
    rtol: float = 1e-4,
    atol: float = 1e-7,
) -> GradCheckReport:
    """Compare ``backward`` against central differences for every scalar entry.

    ``fn`` receives a dict of nodes and must be deterministic: any noise it
    uses has to be regenerated identically on every call.  An entry fails
    when its absolute error exceeds ``atol`` *and* its relative error exceeds
    ``rtol``.
    """
    _, analytic = ad.grad(fn, params)
    report = GradCheckReport(rtol=rtol, atol=atol)
    for name in params:
        numeric = numerical_gradient(fn, params, name, step)
        a = analytic[name]
        abs_err = np.abs(a - numeric)
        scale = np.maximum(np.abs(a), np.abs(numeric))
        rel_err = np.divide(abs_err, scale, out=np.zeros_like(abs_err), where=scale > 0)
        fails = int(np.count_nonzero((abs_err > atol) & (rel_err > rtol)))
        report.params.append(
            ParamReport(
                name=name,
                size=int(a.size),
                max_abs_err=float(abs_err.max(initial=0.0)),
                max_rel_err=float(rel_err[abs_err > atol].max(initial=0.0)),
                failures=fails,
            )
        )
    return report
