"""Dense float64 linear-algebra kernels used by every other module.

All kernels are pure functions over immutable inputs and are deterministic
for a fixed BLAS thread count. Everything is 64-bit internally; 32-bit
appears only at the file boundary (see model.py).
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import DimensionError, ParameterError, SingularSystemError

# Condition-number ceiling for ridge_solve at eps = 0; beyond this the
# normal equations cannot meet the 1e-8 residual contract in float64.
_COND_LIMIT = 1e14


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator: identical seed gives an identical stream
    on every platform. Never share an instance; derive children with
    spawn_rng()."""
    if seed < 0:
        raise ParameterError("seed must be a nonnegative integer")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Deterministically derive n independent child generators."""
    return list(rng.spawn(n))


def as_matrix(a, name: str = "operand") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got ndim={arr.ndim}")
    return np.ascontiguousarray(arr)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with shape validation and a finite-output guarantee."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: ({a.shape[0]}x{a.shape[1]}) @ ({b.shape[0]}x{b.shape[1]})"
        )
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise SingularSystemError("matmul produced non-finite entries")
    return out


def ridge_solve(a: np.ndarray, b: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Solve (AtA + eps*I) X = At B, the normal equations of
    min ||A X - B||^2 + eps ||X||^2, by Cholesky factorization.

    eps = 0 requires AtA to be numerically nonsingular; otherwise a
    SingularSystemError tells the caller to pass eps > 0.
    """
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(
            f"ridge_solve row mismatch: A has {a.shape[0]} rows, B has {b.shape[0]}"
        )
    if eps < 0:
        raise ParameterError("eps must be >= 0")
    gram = a.T @ a
    n = gram.shape[0]
    if eps > 0:
        gram = gram + eps * np.eye(n)
    else:
        cond = np.linalg.cond(gram)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise SingularSystemError(
                f"normal equations singular at eps=0 (cond={cond:.3e}); pass eps > 0"
            )
    rhs = a.T @ b
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            "Cholesky factorization failed; pass eps > 0"
        ) from exc
    x = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("ridge_solve produced non-finite entries; pass eps > 0")
    return x


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(z, dtype=np.float64), 0.0)


def softmax_vec(x, temperature: float) -> np.ndarray:
    """Boltzmann weights exp(-x_i / T) normalized to sum 1.

    Low x means high weight; computed with extremum subtraction so the
    exponentials never overflow. Output sums to 1 within 1e-12 and is
    invariant to adding a constant to all inputs.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    arr = np.asarray(x, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ParameterError("softmax_vec needs at least one entry")
    if not np.all(np.isfinite(arr)):
        raise ParameterError("softmax_vec inputs must be finite")
    scaled = -arr / temperature
    scaled -= scaled.max()
    w = np.exp(scaled)
    return w / w.sum()


def row_softmax(z: np.ndarray, scale: float = 1.0, seg_len: int | None = None) -> np.ndarray:
    """Positive softmax over the columns of each row of z / scale.

    This is the attention nonlinearity used by the toy MHA blocks; each
    row of the output sums to 1. When seg_len is given, columns are
    normalized per consecutive segment of that many tokens so independent
    calibration samples never interact.
    """
    if scale <= 0:
        raise ParameterError("scale must be > 0")
    z = np.asarray(z, dtype=np.float64)
    if seg_len is not None:
        if z.shape[-1] % seg_len != 0:
            raise DimensionError(
                f"token count {z.shape[-1]} not divisible by segment length {seg_len}"
            )
        shaped = z.reshape(z.shape[0], -1, seg_len)
        return row_softmax(shaped, scale).reshape(z.shape)
    s = z / scale
    s = s - s.max(axis=-1, keepdims=True)
    w = np.exp(s)
    return w / w.sum(axis=-1, keepdims=True)


def frobenius(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(a, dtype=np.float64)))))
