"""Central finite-difference verification of the analytic gradients.

The checker is deliberately independent of the tape: it only re-runs the
scalar objective with single coordinates nudged by +/- h, so it can catch
a wrong backward rule anywhere in the engine or the model.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable

from .tensor import Parameter, Tape, Tensor, backward, zero_grads


def finite_diff_report(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-6,
) -> dict[str, float]:
    """Max relative gradient error per parameter.

    `f` must be a deterministic scalar-valued closure over the current
    parameter values.  The analytic gradients come from one taped run of
    `f`; the numeric ones from central differences (f(x+h) - f(x-h)) / 2h
    per coordinate.  The relative error uses max(1, |numeric|) as the
    denominator so coordinates with near-zero gradients do not blow up.
    """
    params = list(params)
    zero_grads(params)
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = {p.name: p.grad.copy() for p in params}

    report: dict[str, float] = {}
    for p in params:
        flat = p.value.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = float(f().data)
            flat[i] = keep - h
            fm = float(f().data)
            flat[i] = keep
            numeric = (fp - fm) / (2.0 * h)
            ana = analytic[p.name].reshape(-1)[i]
            rel = abs(ana - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
        report[p.name] = worst
    zero_grads(params)
    return report


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-6,
) -> float:
    """Max relative error over every coordinate of every parameter."""
    report = finite_diff_report(f, params, h=h)
    return max(report.values()) if report else 0.0
