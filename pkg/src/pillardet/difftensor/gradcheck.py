"""Finite-difference verification of autodiff gradients.

Every differentiable building block registers a self-contained check that
builds a small random instance and compares reverse-mode gradients against
central differences. `run_all` drives the registry; the CLI exposes it so a
broken backward rule is caught before any training run.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as dt


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{status:4s} {self.op_name:32s} rel={self.max_rel_error:.3e} "
                f"abs={self.max_abs_error:.3e}")


def finite_difference_check(op_name: str,
                            fn: Callable[[list[dt.Tensor]], dt.Tensor],
                            inputs: list[np.ndarray],
                            eps: float = 1e-5,
                            tol: float = 1e-4) -> GradReport:
    """Compare autodiff gradients of a scalar-valued fn against central differences.

    fn receives one Tensor per input array and must return a scalar Tensor.
    The relative error uses denominator max(|analytic|, |numeric|, 1e-8) per
    element; the report passes when the worst element stays within tol.
    """
    tensors = [dt.Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(tensors)
    if out.size != 1:
        raise ValueError(f"{op_name}: check function must return a scalar")
    if dt.has_nonfinite(out):
        raise FloatingPointError(f"{op_name}: non-finite forward value")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def eval_at(arrays: list[np.ndarray]) -> float:
        with dt.no_grad():
            val = fn([dt.Tensor(a) for a in arrays]).item()
        if not np.isfinite(val):
            raise FloatingPointError(f"{op_name}: non-finite value during finite differencing")
        return val

    base = [np.array(x, dtype=np.float64) for x in inputs]
    max_rel = 0.0
    max_abs = 0.0
    for i, x in enumerate(base):
        flat = x.reshape(-1)
        grad_flat = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = eval_at(base)
            flat[j] = orig - eps
            f_minus = eval_at(base)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = grad_flat[j]
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), 1e-8)
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
    return GradReport(op_name=op_name, max_rel_error=max_rel,
                      max_abs_error=max_abs, passed=max_rel <= tol)


# -- registry ------------------------------------------------------------------

CheckFn = Callable[[np.random.Generator], GradReport]

_REGISTRY: dict[str, CheckFn] = {}


def register(name: str):
    def deco(fn: CheckFn) -> CheckFn:
        if name in _REGISTRY:
            raise ValueError(f"duplicate gradcheck registration: {name}")
        _REGISTRY[name] = fn
        return fn
    return deco


def registered_names() -> list[str]:
    return sorted(_REGISTRY)


def run_all(seed: int = 0) -> list[GradReport]:
    """Run every registered check with per-check seeded randomness."""
    reports = []
    for name in registered_names():
        key = zlib.crc32(name.encode("utf-8"))
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))
        reports.append(_REGISTRY[name](rng))
    return reports
