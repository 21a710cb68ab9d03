"""Unit- and layer-level importance criteria.

Two activation-aware scores are shipped side by side because they rank
differently: `wanda_elementwise` multiplies |W| with per-feature input
norms, while `wanda_unit` averages the l1 norm of weight-times-input
products per calibration sample. Mask thresholding in the pipeline
consumes the latter. Magnitude, gradient-sensitivity and learnable-gate
baselines follow, plus the attention/MLP split with geometric depth decay.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .linalg import frobenius
from .model import FFN, MHA, ActivationCache, FfnBlock, MhaBlock, ToyModel

ROW = "row"
COL = "col"
HEAD = "head"

# Unit axis that keeps pruned matrices composable: removing an FFN hidden
# unit removes a w1 row and the matching w2 column; the wv row mask owns
# the matching wo columns.
DEFAULT_AXES = {"w1": ROW, "w2": COL, "wq": ROW, "wk": ROW, "wv": ROW, "wo": COL}

# Matrices whose unit masks are chosen directly (w2/wo columns are tied).
MASK_BEARING = {FFN: ("w1",), MHA: ("wq", "wk", "wv")}


@dataclass
class UnitScores:
    block: int
    matrix: str
    axis: str
    criterion: str
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()


@dataclass
class LayerImportance:
    layer: int
    block_kind: str
    value: float
    depth_weight: float = 1.0


def _validate_inputs(w: np.ndarray, x_in: np.ndarray):
    if x_in.ndim != 2 or x_in.shape[1] < 1:
        raise ParameterError("calibration activations must be a nonempty (d_in, tokens) matrix")
    if w.shape[1] != x_in.shape[0]:
        raise DimensionError(
            f"weight expects {w.shape[1]} input features, activations carry {x_in.shape[0]}"
        )


def wanda_elementwise(w: np.ndarray, x_in: np.ndarray) -> np.ndarray:
    """score[i, j] = |w[i, j]| * l2 norm of input feature j over all
    calibration tokens."""
    w = np.asarray(w, dtype=np.float64)
    x_in = np.asarray(x_in, dtype=np.float64)
    _validate_inputs(w, x_in)
    feature_norms = np.sqrt(np.sum(x_in * x_in, axis=1))
    return np.abs(w) * feature_norms[None, :]


def wanda_unit(
    w: np.ndarray, x_in: np.ndarray, axis: str, n_samples: int, num_heads: int = 1
) -> np.ndarray:
    """Per-unit score: sum of |w_ij| * |x_jt| over the non-unit axes,
    divided by the calibration sample count."""
    w = np.asarray(w, dtype=np.float64)
    x_in = np.asarray(x_in, dtype=np.float64)
    _validate_inputs(w, x_in)
    if n_samples < 1:
        raise ParameterError("n_samples must be >= 1")
    abs_w = np.abs(w)
    abs_x_rowsum = np.sum(np.abs(x_in), axis=1)  # sum_t |x_jt| per feature j
    if axis == ROW:
        scores = abs_w @ abs_x_rowsum
    elif axis == COL:
        scores = np.sum(abs_w, axis=0) * abs_x_rowsum
    elif axis == HEAD:
        per_row = abs_w @ abs_x_rowsum
        scores = per_row.reshape(num_heads, -1).sum(axis=1)
    else:
        raise ParameterError(f"unknown unit axis {axis!r}")
    return scores / float(n_samples)


def magnitude_unit(w: np.ndarray, axis: str, num_heads: int = 1) -> np.ndarray:
    """l1 norm of each structured unit's weights."""
    abs_w = np.abs(np.asarray(w, dtype=np.float64))
    if axis == ROW:
        return abs_w.sum(axis=1)
    if axis == COL:
        return abs_w.sum(axis=0)
    if axis == HEAD:
        return abs_w.sum(axis=1).reshape(num_heads, -1).sum(axis=1)
    raise ParameterError(f"unknown unit axis {axis!r}")


def reconstruction_gradient(
    w_hat: np.ndarray, x_in: np.ndarray, target: np.ndarray, n_samples: int
) -> np.ndarray:
    """Analytic gradient of (1/N) ||w_hat @ x_in - target||_F^2 in w_hat."""
    w_hat = np.asarray(w_hat, dtype=np.float64)
    residual = w_hat @ x_in - target
    return (2.0 / float(n_samples)) * residual @ x_in.T


def snip_unit(
    model: ToyModel, cache: ActivationCache, block_index: int, matrix: str | None = None
) -> UnitScores:
    """Gradient-sensitivity score: per unit, sum of |dL/dW * W| where L is
    the quadratic reconstruction loss of the matrix against its own dense
    reference product. Identically zero when the weights sit at the dense
    optimum."""
    block = model.blocks[block_index]
    rec = cache.blocks[block_index]
    if matrix is None:
        matrix = MASK_BEARING[block.kind][0]
    w_hat = block.matrices[matrix]
    x_in, target = _matrix_io(rec, matrix)
    grad = reconstruction_gradient(w_hat, x_in, target, cache.n_samples)
    axis = DEFAULT_AXES[matrix]
    sens = np.abs(grad * w_hat)
    scores = sens.sum(axis=1) if axis == ROW else sens.sum(axis=0)
    return UnitScores(block_index, matrix, axis, "snip", scores)


def _matrix_io(rec, matrix: str) -> tuple[np.ndarray, np.ndarray]:
    """Input activations and dense-reference target for one matrix."""
    if matrix == "w1":
        return rec.input_pre, rec.z_pre
    if matrix == "w2":
        return rec.a_pre, rec.out_pre
    if matrix == "wq":
        return rec.input_pre, rec.q_pre
    if matrix == "wk":
        return rec.input_pre, rec.k_pre
    if matrix == "wv":
        return rec.a_pre, rec.a_attn_pre
    if matrix == "wo":
        return rec.a_attn_pre, rec.out_pre
    raise ParameterError(f"unknown matrix {matrix!r}")


def l0_gate_scores(
    model: ToyModel,
    cache: ActivationCache,
    block_index: int,
    steps: int,
    rng: np.random.Generator,
    matrix: str | None = None,
    lam: float = 1e-2,
    lr: float = 0.05,
) -> UnitScores:
    """Sigmoid gates per row unit trained by gradient descent on the
    reconstruction loss plus lam * sum(gates). Returns final gate values
    in [0, 1]."""
    if steps < 1:
        raise ParameterError("steps must be >= 1")
    block = model.blocks[block_index]
    rec = cache.blocks[block_index]
    if matrix is None:
        matrix = MASK_BEARING[block.kind][0]
    w = block.matrices[matrix]
    x_in, target = _matrix_io(rec, matrix)
    n_units = w.shape[0]
    wx = w @ x_in  # gated product is diag(g) @ wx
    # Saturated-open start with a tiny jitter so equal units break ties
    # deterministically per seed.
    theta = np.full(n_units, 4.0) + rng.normal(0.0, 1e-3, size=n_units)
    inv_n = 1.0 / float(cache.n_samples)
    for _ in range(steps):
        g = 1.0 / (1.0 + np.exp(-theta))
        residual = g[:, None] * wx - target
        grad_g = 2.0 * inv_n * np.sum(residual * wx, axis=1) + lam
        theta -= lr * grad_g * g * (1.0 - g)
    gates = 1.0 / (1.0 + np.exp(-theta))
    return UnitScores(block_index, matrix, ROW, "l0", gates)


# ---------------------------------------------------------------------------
# Layer-level importance
# ---------------------------------------------------------------------------


def _population_var(w: np.ndarray) -> float:
    flat = np.asarray(w, dtype=np.float64).ravel()
    return float(np.mean((flat - flat.mean()) ** 2))


def attention_head_term(w_h: np.ndarray) -> float:
    """l1 + 0.1 * Var + 0.01 * Frobenius of one head's weight matrix."""
    return float(np.abs(w_h).sum()) + 0.1 * _population_var(w_h) + 0.01 * frobenius(w_h)


def mlp_matrix_term(w_m: np.ndarray) -> float:
    return float(np.abs(w_m).sum()) + 0.05 * _population_var(w_m)


def head_matrices(block: MhaBlock) -> list[np.ndarray]:
    """One matrix per head: the head's row slices of wq/wk/wv stacked with
    its wo column slice transposed."""
    out = []
    for sl in block.head_slices():
        out.append(
            np.vstack([block.wq[sl, :], block.wk[sl, :], block.wv[sl, :], block.wo[:, sl].T])
        )
    return out


def module_importance(block, gamma: float, rho: float, layer_one_based: int) -> float:
    """Depth-decayed module importance: attention blocks sum the per-head
    term scaled by rho, MLP blocks sum the fc1/fc2 term. Depth weight is
    gamma**layer with layers counted from 1."""
    if not 0.0 < gamma <= 1.0:
        raise ParameterError("gamma must be in (0, 1]")
    if rho <= 0:
        raise ParameterError("rho must be > 0")
    if layer_one_based < 1:
        raise ParameterError("layer index is 1-based")
    depth = gamma ** layer_one_based
    if isinstance(block, MhaBlock):
        return depth * rho * sum(attention_head_term(w_h) for w_h in head_matrices(block))
    if isinstance(block, FfnBlock):
        return depth * (mlp_matrix_term(block.w1) + mlp_matrix_term(block.w2))
    raise ParameterError(f"unknown block type {type(block).__name__}")


def layer_importance(
    model: ToyModel,
    cache: ActivationCache,
    method: str,
    gamma: float = 1.0,
    rho: float = 1.0,
) -> list[LayerImportance]:
    """Per-block importance. "wanda-sum" averages the activation-aware
    unit scores over every matrix of the block; "module-split" applies the
    attention/MLP formulas with depth decay."""
    out: list[LayerImportance] = []
    if method == "wanda-sum":
        for i, block in enumerate(model.blocks):
            rec = cache.blocks[i]
            pooled: list[np.ndarray] = []
            for name, w in block.matrices.items():
                x_in, _ = _matrix_io(rec, name)
                pooled.append(
                    wanda_unit(w, x_in, DEFAULT_AXES[name], cache.n_samples)
                )
            value = float(np.concatenate(pooled).mean())
            out.append(LayerImportance(i, block.kind, value))
        return out
    if method == "module-split":
        for i, block in enumerate(model.blocks):
            value = module_importance(block, gamma, rho, i + 1)
            out.append(LayerImportance(i, block.kind, value, gamma ** (i + 1)))
        return out
    raise ParameterError(f"unknown importance method {method!r}")


def block_unit_scores(
    model: ToyModel,
    cache: ActivationCache,
    block_index: int,
    criterion: str,
    rng: np.random.Generator | None = None,
    l0_steps: int = 200,
) -> dict[str, UnitScores]:
    """Unit scores for every mask-bearing matrix of one block under the
    named criterion (wanda | magnitude | snip | l0)."""
    block = model.blocks[block_index]
    rec = cache.blocks[block_index]
    result: dict[str, UnitScores] = {}
    for name in MASK_BEARING[block.kind]:
        w = block.matrices[name]
        axis = DEFAULT_AXES[name]
        if criterion == "wanda":
            x_in, _ = _matrix_io(rec, name)
            scores = wanda_unit(w, x_in, axis, cache.n_samples)
            result[name] = UnitScores(block_index, name, axis, "wanda", scores)
        elif criterion == "magnitude":
            result[name] = UnitScores(
                block_index, name, axis, "magnitude", magnitude_unit(w, axis)
            )
        elif criterion == "snip":
            result[name] = snip_unit(model, cache, block_index, name)
        elif criterion == "l0":
            if rng is None:
                raise ParameterError("l0 scoring needs an rng")
            result[name] = l0_gate_scores(model, cache, block_index, l0_steps, rng, name)
        else:
            raise ParameterError(f"unknown criterion {criterion!r}")
    return result


def export_scores_csv(score_sets: list[UnitScores], model: ToyModel) -> str:
    """CSV with columns layer,block_kind,unit_axis,unit_index,criterion,score."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "block_kind", "unit_axis", "unit_index", "criterion", "score"])
    for us in score_sets:
        kind = model.blocks[us.block].kind
        for idx, score in enumerate(us.scores):
            writer.writerow([us.block, kind, us.axis, idx, us.criterion, repr(float(score))])
    return buf.getvalue()
