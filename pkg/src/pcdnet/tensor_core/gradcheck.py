"""Central finite-difference checks against tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradcheckReport:
    name: str
    max_rel_error: float
    tol: float
    per_input: list = field(default_factory=list)
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" kink_redraws={self.skipped}" if self.skipped else ""
        return f"{status} {self.name:<28s} max_rel_err={self.max_rel_error:.3e} tol={self.tol:.0e}{extra}"


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # infinity-norm error scaled by the larger gradient magnitude
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _scalarize(out: Tensor, probe: np.ndarray):
    from . import ops

    if out.size == 1:
        return out
    return ops.weighted_sum(out, probe)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              tol: float = 1e-4, name: str = "op", seed: int = 0) -> GradcheckReport:
    """Compare analytic and central-difference gradients of ``fn(*inputs)``.

    Non-scalar outputs are reduced with a fixed random projection so that
    every output element contributes. Inputs should be float64.
    """
    rng = np.random.default_rng(seed)
    out0 = fn(*inputs)
    probe = rng.standard_normal(out0.shape) if out0.size != 1 else None

    def value() -> float:
        out = fn(*inputs)
        return float(out.data.sum()) if probe is None else float(np.sum(out.data * probe))

    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        loss = _scalarize(fn(*inputs), probe)
    tape.backward(loss)

    errors = []
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = value()
            flat[i] = orig - eps
            minus = value()
            flat[i] = orig
            nflat[i] = (plus - minus) / (2 * eps)
        errors.append(_relative_error(analytic, numeric))
    worst = max(errors) if errors else 0.0
    return GradcheckReport(name, worst, tol, errors)


def spot_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], count: int, eps: float = 1e-5,
               tol: float = 1e-4, seed: int = 0, name: str = "model", max_redraws: int = 50) -> GradcheckReport:
    """Finite-difference check of ``count`` randomly chosen scalar parameter entries.

    ``loss_fn`` must be a deterministic scalar function of the parameters.
    A large network almost always has some ReLU within ``eps`` of its kink,
    and stepping across one corrupts the difference quotient. Entries whose
    +/-eps evaluations change any ReLU sign or max-pool winner are therefore
    redrawn; ``skipped`` counts them.
    """
    from .ops import kink_trace

    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    with kink_trace() as base, Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    def probe(flat, i, value):
        orig = flat[i]
        flat[i] = value
        try:
            with kink_trace() as trace:
                out = float(loss_fn().data)
        finally:
            flat[i] = orig
        return out, trace == base

    errors, skipped = [], 0
    for _ in range(count):
        for _attempt in range(max_redraws):
            p = params[int(rng.integers(len(params)))]
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
            # probe entries carrying real signal; near-zero grads only measure FD noise
            live = np.flatnonzero(np.abs(gflat) >= 1e-3 * np.abs(gflat).max(initial=0.0))
            i = int(rng.choice(live)) if live.size else int(rng.integers(flat.size))
            plus, ok_p = probe(flat, i, flat[i] + eps)
            minus, ok_m = probe(flat, i, flat[i] - eps)
            if ok_p and ok_m:
                break
            skipped += 1
        else:
            raise RuntimeError(f"spot_check: no kink-free entry found in {max_redraws} draws")
        analytic = float(gflat[i])
        numeric = (plus - minus) / (2 * eps)
        denom = max(abs(analytic), abs(numeric))
        errors.append(0.0 if denom < 1e-10 else abs(analytic - numeric) / denom)
    return GradcheckReport(name, max(errors), tol, errors, skipped)
