"""Independent verification machinery: exhaustive mask enumeration, a
projected-gradient solver for the constrained energy allocation, and a
central-finite-difference gradient checker.

These are slow paths for tests and the `verify` subcommand only; nothing
on the production pruning path imports this module.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .allocation import ClosedFormContext
from .errors import ParameterError, SizeError

ENUM_UNIT_CAP = 12


@dataclass
class EnumResult:
    best_bits: np.ndarray
    best_loss: float
    table: list[tuple[tuple[int, ...], float]]


def enumerate_masks(ctx: ClosedFormContext, k: int) -> EnumResult:
    """Exact layer loss of every k-subset of retained units, iterated in
    lexicographic order; ties resolve to the lexicographically smallest
    bit tuple."""
    n = ctx.n_units
    if n > ENUM_UNIT_CAP:
        raise SizeError(f"enumeration capped at {ENUM_UNIT_CAP} units, got {n}")
    if not 0 <= k <= n:
        raise ParameterError(f"retained count {k} outside [0, {n}]")
    table: list[tuple[tuple[int, ...], float]] = []
    best: tuple[float, tuple[int, ...]] | None = None
    for subset in combinations(range(n), k):
        bits = np.zeros(n, dtype=bool)
        bits[list(subset)] = True
        loss = ctx.mask_loss(bits)
        key = tuple(int(b) for b in bits)
        table.append((key, loss))
        if best is None or (loss, key) < best:
            best = (loss, key)
    return EnumResult(np.array(best[1], dtype=bool), best[0], table)


def project_box_sum(v, total: float, lower: float, upper: float) -> np.ndarray:
    """Euclidean projection of v onto {x : sum(x) = total, lower <= x <=
    upper} by bisection on the shift multiplier."""
    v = np.asarray(v, dtype=np.float64).ravel()
    n = v.size
    if not lower * n <= total <= upper * n:
        raise ParameterError(
            f"sum target {total} infeasible for {n} coordinates in [{lower}, {upper}]"
        )
    lo = float(np.min(v) - upper)
    hi = float(np.max(v) - lower)
    # 64 halvings shrink the bracket below 1e-18 relative; the residual
    # spread below then lands the constraint at 1e-12 or better.
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        s = np.clip(v - mid, lower, upper).sum()
        if s > total:
            lo = mid
        else:
            hi = mid
    x = np.clip(v - 0.5 * (lo + hi), lower, upper)
    # Spread the bisection residual over strictly interior coordinates.
    residual = total - x.sum()
    interior = (x > lower) & (x < upper)
    if np.any(interior) and residual != 0.0:
        x[interior] += residual / interior.sum()
        x = np.clip(x, lower, upper)
    return x


def energy_minimize_projected(
    importances,
    r_bar: float,
    temperature: float,
    n_layers: int,
    steps: int = 10_000,
    lr: float = 0.1,
    lower: float = 1e-6,
    tol: float = 1e-12,
) -> np.ndarray:
    """Minimize sum_l -exp(-I_l/T) * log(r_l) subject to sum(r) = r_bar *
    L and r in [lower, 1], by projected gradient descent with Armijo
    backtracking from the uniform feasible point."""
    imps = np.asarray(importances, dtype=np.float64).ravel()
    if imps.size != n_layers:
        raise ParameterError(f"expected {n_layers} importances, got {imps.size}")
    if temperature <= 0:
        raise ParameterError("temperature must be > 0")
    budget = r_bar * n_layers
    if not lower * n_layers < budget < n_layers:
        raise ParameterError(
            f"budget {budget} leaves no feasible interior for {n_layers} layers"
        )
    beta = np.exp(-imps / temperature)

    def objective(r: np.ndarray) -> float:
        return float(-np.dot(beta, np.log(r)))

    def gradient(r: np.ndarray) -> np.ndarray:
        return -beta / r

    r = project_box_sum(np.full(n_layers, r_bar), budget, lower, 1.0)
    value = objective(r)
    step = lr
    for _ in range(steps):
        grad = gradient(r)
        while True:
            candidate = project_box_sum(r - step * grad, budget, lower, 1.0)
            cand_value = objective(candidate)
            if cand_value <= value + 1e-15 or step < 1e-18:
                break
            step *= 0.5
        moved = float(np.max(np.abs(candidate - r)))
        improved = value - cand_value
        r, value = candidate, cand_value
        step = min(step * 2.0, lr)
        if moved < tol or (moved < 1e-9 and improved < 1e-15):
            break
    return r


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar field, one coordinate at a time."""
    if h <= 0:
        raise ParameterError("step h must be > 0")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad
