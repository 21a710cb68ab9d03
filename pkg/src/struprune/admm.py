"""Divide-and-conquer alternating optimizer.

Each block is solved as an independent layer pair against the frozen
dense reference: per outer iteration it re-derives structured masks at
the planned budget, ridge-refits the reconstructed weights on retained
units, updates the activation/output iterates (closed form for FFN,
three sequential gradient sub-solves for MHA), and finally recovers the
teacher matrices from the iterates. Calibration inputs always come from
the frozen reference, which is what keeps block solves independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .allocation import (
    PruneMask,
    SparsityPlan,
    binarize_by_threshold,
    round_half_away,
)
from .errors import ParameterError, SolverError
from .importance import DEFAULT_AXES, magnitude_unit, wanda_unit
from .linalg import make_rng, relu, ridge_solve, row_softmax
from .model import (
    FFN,
    MHA,
    ActivationCache,
    BlockActivations,
    FfnBlock,
    MhaBlock,
    ToyModel,
)


@dataclass
class SolverConfig:
    alpha: float = 1.0
    beta: float = 1.0
    outer_iters: int = 8
    inner_steps: int = 30
    learning_rate: float = 0.01
    ridge_eps: float = 1e-6
    seed: int = 0
    mask_criterion: str = "closed-form"
    recover_mode: str = "ridge"

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ParameterError("alpha and beta must be > 0")
        if self.outer_iters < 1:
            raise ParameterError("outer_iters must be >= 1")
        if self.inner_steps < 0:
            raise ParameterError("inner_steps must be >= 0")


@dataclass
class BlockState:
    """Single-owner mutable state of one layer pair."""

    layer: int
    kind: str
    w_hat: dict[str, np.ndarray]
    teacher: dict[str, np.ndarray]
    masks: dict[str, PruneMask] = field(default_factory=dict)
    budget: dict[str, int] = field(default_factory=dict)
    num_heads: int = 1

    def effective(self, name: str) -> np.ndarray:
        w = self.w_hat[name]
        if name not in self.masks:
            return w
        bits = self.masks[name].bits.astype(np.float64)
        if DEFAULT_AXES[name] == "row":
            return w * bits[:, None]
        return w * bits[None, :]


@dataclass
class AdmmState:
    blocks: list[BlockState]
    trace: list[tuple[int, int, str, float]] = field(default_factory=list)
    initial_post_prune_loss: float = 0.0


@dataclass
class AdmmResult:
    model: ToyModel
    trace: list[tuple[int, int, str, float]]
    initial_post_prune_loss: float
    final_loss: float
    masks: dict[int, dict[str, PruneMask]] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Weight recovery
# ---------------------------------------------------------------------------


def recover_weights(
    z: np.ndarray,
    a_prev: np.ndarray,
    eps: float,
    mode: str = "ridge",
    steps: int = 500,
    lr: float | None = None,
) -> np.ndarray:
    """Solve min ||W a_prev - z||^2 + eps ||W||^2 for W.

    The ridge path is the deterministic default; the gradient path exists
    for parity testing against it.
    """
    if mode == "ridge":
        return ridge_solve(a_prev.T, z.T, eps).T
    if mode != "sgd":
        raise ParameterError(f"unknown recovery mode {mode!r}")
    w = np.zeros((z.shape[0], a_prev.shape[0]))
    if lr is None:
        lr = 0.9 / (2.0 * float(np.sum(a_prev * a_prev)) + eps + 1e-12)
    for _ in range(steps):
        grad = 2.0 * (w @ a_prev - z) @ a_prev.T + 2.0 * eps * w
        w -= lr * grad
    return w


def _refit_rows(w_hat: np.ndarray, bits: np.ndarray, x_in: np.ndarray, target: np.ndarray, eps: float) -> np.ndarray:
    """Ridge-refit the retained rows of w_hat so they reproduce the target
    rows on x_in; masked rows keep their previous values.

    The fit is on the residual, so under-determined directions stay at the
    current weights and an already-optimal matrix is returned unchanged.
    """
    out = w_hat.copy()
    retained = np.flatnonzero(bits)
    if retained.size:
        residual = target[retained] - w_hat[retained] @ x_in
        sol = ridge_solve(x_in.T, residual.T, eps)
        out[retained] = w_hat[retained] + sol.T
    return out


def _refit_cols(w_hat: np.ndarray, bits: np.ndarray, a_in: np.ndarray, target: np.ndarray, eps: float) -> np.ndarray:
    """Ridge-refit the retained columns of w_hat so the column-masked
    product reproduces the target; inputs are the retained rows of a_in.
    Residual-based like _refit_rows."""
    out = w_hat.copy()
    retained = np.flatnonzero(bits)
    if retained.size:
        residual = target - w_hat[:, retained] @ a_in[retained]
        sol = ridge_solve(a_in[retained].T, residual.T, eps)
        out[:, retained] = w_hat[:, retained] + sol.T
    return out


# ---------------------------------------------------------------------------
# FFN subproblems
# ---------------------------------------------------------------------------


def prune_scores(
    state: BlockState,
    rec: BlockActivations,
    matrix: str,
    criterion: str,
    n_samples: int,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Unit scores for one mask-bearing matrix from the current iterates."""
    w_hat = state.w_hat[matrix]
    x_pre = rec.a_pre if matrix == "wv" else rec.input_pre
    if criterion == "closed-form":
        # Exact per-unit decrease of the sample-summed prune objective
        # ||b_row - M_j c_row||^2: retaining unit j saves
        # 2 <c_j, b_j> - ||c_j||^2. This is the tie-aware completion of
        # thresholding the ratio score (identical ordering when the unit
        # weights c_j^2 are constant) and stays informative at the
        # pristine state, where every ratio score is exactly 1.
        teach = state.teacher[matrix]
        x_cur = rec.a if matrix == "wv" else rec.input_pre
        b_rows = teach @ x_cur
        c_rows = w_hat @ x_pre
        return 2.0 * np.sum(c_rows * b_rows, axis=1) - np.sum(c_rows * c_rows, axis=1)
    if criterion == "wanda":
        return wanda_unit(w_hat, x_pre, "row", n_samples)
    if criterion == "magnitude":
        return magnitude_unit(w_hat, "row")
    if criterion == "snip":
        target = state.teacher[matrix] @ (rec.a if matrix == "wv" else rec.input_pre)
        grad = (2.0 / n_samples) * (w_hat @ x_pre - target) @ x_pre.T
        return np.abs(grad * w_hat).sum(axis=1)
    if criterion == "l0":
        if rng is None:
            raise ParameterError("l0 criterion needs an rng")
        target = state.teacher[matrix] @ (rec.a if matrix == "wv" else rec.input_pre)
        return _l0_gates(w_hat, x_pre, target, n_samples, rng)
    raise ParameterError(f"unknown mask criterion {criterion!r}")


def _l0_gates(w, x_in, target, n_samples, rng, steps=100, lam=1e-2, lr=0.05):
    wx = w @ x_in
    theta = np.full(w.shape[0], 4.0) + rng.normal(0.0, 1e-3, size=w.shape[0])
    inv_n = 1.0 / float(n_samples)
    for _ in range(steps):
        g = 1.0 / (1.0 + np.exp(-theta))
        grad_g = 2.0 * inv_n * np.sum((g[:, None] * wx - target) * wx, axis=1) + lam
        theta -= lr * grad_g * g * (1.0 - g)
    return 1.0 / (1.0 + np.exp(-theta))


def ffn_prune_step(
    state: BlockState,
    rec: BlockActivations,
    cfg: SolverConfig,
    n_samples: int,
    rng: np.random.Generator | None = None,
) -> PruneMask:
    """Mask the hidden units at the planned budget, then ridge-refit the
    retained w1 rows and the matching w2 columns onto the teachers'
    current products."""
    scores = prune_scores(state, rec, "w1", cfg.mask_criterion, n_samples, rng)
    k = state.budget["w1"]
    mask = binarize_by_threshold(scores, k, state.layer, "w1", "row")
    state.masks["w1"] = mask
    state.masks["w2"] = PruneMask(state.layer, "w2", "col", mask.bits, mask.k)
    target_up = state.teacher["w1"] @ rec.input_pre
    state.w_hat["w1"] = _refit_rows(state.w_hat["w1"], mask.bits, rec.input_pre, target_up, cfg.ridge_eps)
    target_down = state.teacher["w2"] @ rec.a
    state.w_hat["w2"] = _refit_cols(state.w_hat["w2"], mask.bits, rec.a, target_down, cfg.ridge_eps)
    return mask


def ffn_update_activation(
    w_next: np.ndarray, z_next_pre: np.ndarray, z: np.ndarray, alpha: float, beta: float
) -> np.ndarray:
    """Closed form a = (alpha W'W + beta I)^-1 (alpha W' z_next_pre +
    beta relu(z)); minimizes alpha ||z_next_pre - W a||^2 + beta
    ||a - relu(z)||^2."""
    n = w_next.shape[1]
    gram = alpha * (w_next.T @ w_next) + beta * np.eye(n)
    rhs = alpha * (w_next.T @ z_next_pre) + beta * relu(z)
    factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=False)
    return scipy.linalg.cho_solve(factor, rhs, check_finite=False)


def ffn_update_output(
    w1_eff: np.ndarray,
    input_pre: np.ndarray,
    a: np.ndarray,
    z_prev: np.ndarray,
    alpha: float,
    beta: float,
) -> np.ndarray:
    """Piecewise output update: z1 = masked product on the reference
    input, z2 the convex blend with a; coordinates negative in the
    pre-update z take z1, the rest take z2."""
    z1 = w1_eff @ input_pre
    z2 = (beta * a + alpha * z1) / (alpha + beta)
    return np.where(z_prev < 0.0, z1, z2)


def ffn_objective(state: BlockState, rec: BlockActivations, cfg: SolverConfig, n_samples: int) -> float:
    w1 = state.effective("w1")
    w2 = state.effective("w2")
    t1 = cfg.alpha * _sq(rec.out_pre - w2 @ rec.a)
    t2 = cfg.beta * _sq(rec.a - relu(rec.z))
    t3 = cfg.alpha * _sq(rec.z - w1 @ rec.input_pre)
    return (t1 + t2 + t3) / float(n_samples)


def _sq(arr: np.ndarray) -> float:
    return float(np.sum(arr * arr))


# ---------------------------------------------------------------------------
# MHA subproblems (gradient sub-solves on the separated objective)
# ---------------------------------------------------------------------------


def mha_obj_a(a, wv_eff, a_attn, z, alpha, beta, head_scale, seg_len=None) -> float:
    phi = row_softmax(z, head_scale, seg_len)
    return alpha * _sq(a_attn - wv_eff @ a) + beta * _sq(a - phi)


def mha_grad_a(a, wv_eff, a_attn, z, alpha, beta, head_scale, seg_len=None) -> np.ndarray:
    phi = row_softmax(z, head_scale, seg_len)
    return -2.0 * alpha * wv_eff.T @ (a_attn - wv_eff @ a) + 2.0 * beta * (a - phi)


def mha_obj_attn(a_attn, wo_eff, wv_eff, a, z_next_pre, alpha) -> float:
    return alpha * _sq(z_next_pre - wo_eff @ a_attn) + alpha * _sq(a_attn - wv_eff @ a)


def mha_grad_attn(a_attn, wo_eff, wv_eff, a, z_next_pre, alpha) -> np.ndarray:
    return -2.0 * alpha * wo_eff.T @ (z_next_pre - wo_eff @ a_attn) + 2.0 * alpha * (
        a_attn - wv_eff @ a
    )


def mha_obj_z(z, a, q_pre, k_pre, alpha, beta, head_scale, seg_len=None) -> float:
    phi = row_softmax(z, head_scale, seg_len)
    return beta * _sq(a - phi) + alpha * _sq(z - q_pre) + alpha * _sq(z - k_pre)


def mha_grad_z(z, a, q_pre, k_pre, alpha, beta, head_scale, seg_len=None) -> np.ndarray:
    phi = row_softmax(z, head_scale, seg_len)
    resid = a - phi
    if seg_len is None:
        inner = np.sum(resid * phi, axis=1, keepdims=True)
    else:
        shaped = (resid * phi).reshape(z.shape[0], -1, seg_len)
        inner = shaped.sum(axis=2, keepdims=True)
        inner = np.broadcast_to(inner, shaped.shape).reshape(z.shape)
    soft_grad = -(2.0 * beta / head_scale) * phi * (resid - inner)
    return soft_grad + 2.0 * alpha * (z - q_pre) + 2.0 * alpha * (z - k_pre)


def _descend(x0, obj, grad, steps, lr, label, layer):
    """Plain gradient descent with a divergence guard: an objective blow-up
    beyond 10x the entry value aborts with the trace attached."""
    x = x0
    start = obj(x0)
    trace = [start]
    for _ in range(steps):
        x = x - lr * grad(x)
        value = obj(x)
        trace.append(value)
        if not np.isfinite(value) or value > 10.0 * max(start, 1e-30):
            raise SolverError(
                f"{label} sub-solve diverged at layer {layer}: trace={trace}"
            )
    return x


def mha_update(
    state: BlockState, rec: BlockActivations, cfg: SolverConfig, seg_len: int | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Three sequential gradient sub-solves: a, then a_attn, then z.
    The query and key branches share the single z iterate."""
    head_scale = float(np.sqrt(state.w_hat["wq"].shape[0] // _num_heads(state)))
    wv = state.effective("wv")
    wo = state.effective("wo")
    wq = state.effective("wq")
    wk = state.effective("wk")
    q_pre = wq @ rec.input_pre
    k_pre = wk @ rec.input_pre
    a = _descend(
        rec.a,
        lambda x: mha_obj_a(x, wv, rec.a_attn, rec.z, cfg.alpha, cfg.beta, head_scale, seg_len),
        lambda x: mha_grad_a(x, wv, rec.a_attn, rec.z, cfg.alpha, cfg.beta, head_scale, seg_len),
        cfg.inner_steps,
        cfg.learning_rate,
        "activation",
        state.layer,
    )
    rec.a = a
    a_attn = _descend(
        rec.a_attn,
        lambda x: mha_obj_attn(x, wo, wv, rec.a, rec.out_pre, cfg.alpha),
        lambda x: mha_grad_attn(x, wo, wv, rec.a, rec.out_pre, cfg.alpha),
        cfg.inner_steps,
        cfg.learning_rate,
        "attention-activation",
        state.layer,
    )
    rec.a_attn = a_attn
    z = _descend(
        rec.z,
        lambda x: mha_obj_z(x, rec.a, q_pre, k_pre, cfg.alpha, cfg.beta, head_scale, seg_len),
        lambda x: mha_grad_z(x, rec.a, q_pre, k_pre, cfg.alpha, cfg.beta, head_scale, seg_len),
        cfg.inner_steps,
        cfg.learning_rate,
        "output",
        state.layer,
    )
    rec.z = z
    return a, a_attn, z


def _num_heads(state: BlockState) -> int:
    return state.num_heads


def mha_prune_step(
    state: BlockState,
    rec: BlockActivations,
    cfg: SolverConfig,
    n_samples: int,
    rng: np.random.Generator | None = None,
) -> dict[str, PruneMask]:
    """Mask each projection separately at the planned budget; the value
    mask owns the matching output-projection columns."""
    for name in ("wq", "wk", "wv"):
        scores = prune_scores(state, rec, name, cfg.mask_criterion, n_samples, rng)
        mask = binarize_by_threshold(scores, state.budget[name], state.layer, name, "row")
        state.masks[name] = mask
        x_in = rec.a if name == "wv" else rec.input_pre
        target = state.teacher[name] @ (rec.a if name == "wv" else rec.input_pre)
        state.w_hat[name] = _refit_rows(state.w_hat[name], mask.bits, x_in, target, cfg.ridge_eps)
    vbits = state.masks["wv"].bits
    state.masks["wo"] = PruneMask(state.layer, "wo", "col", vbits, int(vbits.sum()))
    target_o = state.teacher["wo"] @ rec.a_attn
    state.w_hat["wo"] = _refit_cols(state.w_hat["wo"], vbits, rec.a_attn, target_o, cfg.ridge_eps)
    return state.masks


def mha_objective(
    state: BlockState, rec: BlockActivations, cfg: SolverConfig, n_samples: int,
    seg_len: int | None = None,
) -> float:
    head_scale = float(np.sqrt(state.w_hat["wq"].shape[0] // _num_heads(state)))
    q_pre = state.effective("wq") @ rec.input_pre
    k_pre = state.effective("wk") @ rec.input_pre
    total = (
        cfg.alpha * _sq(rec.out_pre - state.effective("wo") @ rec.a_attn)
        + cfg.alpha * _sq(rec.a_attn - state.effective("wv") @ rec.a)
        + cfg.beta * _sq(rec.a - row_softmax(rec.z, head_scale, seg_len))
        + cfg.alpha * _sq(rec.z - q_pre)
        + cfg.alpha * _sq(rec.z - k_pre)
    )
    return total / float(n_samples)


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------


def _init_state(layer: int, block, plan: SparsityPlan) -> BlockState:
    retention = plan.retention_for(layer)
    w_hat = {k: v.copy() for k, v in block.matrices.items()}
    teacher = {k: v.copy() for k, v in block.matrices.items()}
    state = BlockState(layer, block.kind, w_hat, teacher)
    if block.kind == FFN:
        state.budget = {"w1": round_half_away(retention * block.w1.shape[0])}
    else:
        d = block.wq.shape[0]
        k = round_half_away(retention * d)
        state.budget = {"wq": k, "wk": k, "wv": k}
        state.num_heads = block.num_heads
    return state


def run_outer_loop(
    model: ToyModel, cache: ActivationCache, plan: SparsityPlan, cfg: SolverConfig
) -> AdmmResult:
    """Alternating solve of every layer pair for cfg.outer_iters
    iterations; returns the masked model and the per-iteration objective
    trace (one row per block per iteration)."""
    layers = {e.layer for e in plan.entries}
    missing = [i for i in range(len(model.blocks)) if i not in layers]
    if missing:
        raise ParameterError(f"plan is missing entries for blocks {missing}")
    solver = AdmmState([_init_state(i, b, plan) for i, b in enumerate(model.blocks)])
    for rec in cache.blocks:
        rec.reset_iterates()
    rng_children = make_rng(cfg.seed).spawn(len(model.blocks))
    for it in range(1, cfg.outer_iters + 1):
        for i, state in enumerate(solver.blocks):
            rec = cache.blocks[i]
            if state.kind == FFN:
                ffn_prune_step(state, rec, cfg, cache.n_samples, rng_children[i])
                if it == 1:
                    solver.initial_post_prune_loss += ffn_objective(state, rec, cfg, cache.n_samples)
                rec.a = ffn_update_activation(
                    state.effective("w2"), rec.out_pre, rec.z, cfg.alpha, cfg.beta
                )
                rec.z = ffn_update_output(
                    state.effective("w1"), rec.input_pre, rec.a, rec.z, cfg.alpha, cfg.beta
                )
                state.teacher["w1"] = recover_weights(
                    rec.z, rec.input_pre, cfg.ridge_eps, cfg.recover_mode
                )
                state.teacher["w2"] = recover_weights(
                    rec.out_pre, rec.a, cfg.ridge_eps, cfg.recover_mode
                )
                objective = ffn_objective(state, rec, cfg, cache.n_samples)
            else:
                mha_prune_step(state, rec, cfg, cache.n_samples, rng_children[i])
                if it == 1:
                    solver.initial_post_prune_loss += mha_objective(
                        state, rec, cfg, cache.n_samples, cache.seq_len
                    )
                mha_update(state, rec, cfg, cache.seq_len)
                wqk = recover_weights(rec.z, rec.input_pre, cfg.ridge_eps, cfg.recover_mode)
                state.teacher["wq"] = wqk
                state.teacher["wk"] = wqk.copy()
                state.teacher["wv"] = recover_weights(
                    rec.a_attn, rec.a, cfg.ridge_eps, cfg.recover_mode
                )
                state.teacher["wo"] = recover_weights(
                    rec.out_pre, rec.a_attn, cfg.ridge_eps, cfg.recover_mode
                )
                objective = mha_objective(state, rec, cfg, cache.n_samples, cache.seq_len)
            if not np.isfinite(objective):
                raise SolverError(f"non-finite objective at layer {i}, iteration {it}")
            solver.trace.append((it, i, state.kind, objective))
    pruned = _masked_model(model, solver.blocks)
    final_loss = float(
        sum(obj for t, _, _, obj in solver.trace if t == cfg.outer_iters)
    )
    masks = {s.layer: dict(s.masks) for s in solver.blocks}
    return AdmmResult(pruned, solver.trace, solver.initial_post_prune_loss, final_loss, masks)


def _masked_model(model: ToyModel, states: list[BlockState]) -> ToyModel:
    out = model.copy()
    for state in states:
        block = out.blocks[state.layer]
        if isinstance(block, FfnBlock):
            block.w1 = state.effective("w1")
            block.w2 = state.effective("w2")
        else:
            block.wq = state.effective("wq")
            block.wk = state.effective("wk")
            block.wv = state.effective("wv")
            block.wo = state.effective("wo")
    return out


def export_trace_csv(trace: list[tuple[int, int, str, float]]) -> str:
    lines = ["iteration,layer,block_kind,objective"]
    for it, layer, kind, obj in trace:
        lines.append(f"{it},{layer},{kind},{obj!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Low-rank residual correction
# ---------------------------------------------------------------------------


def lowrank_correct(
    block,
    rec: BlockActivations,
    rank: int,
    steps: int,
    lr: float | None,
    rng: np.random.Generator,
    n_samples: int,
):
    """Additive rank-limited correction per weight matrix, trained by
    gradient descent on the reconstruction loss against the dense
    reference products; units killed by the structured mask stay exactly
    zero because the correction itself is masked."""
    corrected = block.copy()
    io_map = _block_io(corrected, rec)
    for name, (w, x_in, target) in io_map.items():
        n_rows, n_cols = w.shape
        if rank < 1 or rank > min(n_rows, n_cols):
            raise ParameterError(f"rank must be in [1, {min(n_rows, n_cols)}]")
        unit_mask = _zero_unit_mask(w, name)
        a_fac = 0.01 * rng.normal(size=(n_rows, rank))
        b_fac = np.zeros((rank, n_cols))
        step = lr if lr is not None else float(n_samples) / (2.0 * np.sum(x_in * x_in) + 1e-12)
        inv_n = 2.0 / float(n_samples)
        for _ in range(steps):
            correction = unit_mask * (a_fac @ b_fac)
            grad_c = unit_mask * (inv_n * ((w + correction) @ x_in - target) @ x_in.T)
            a_fac = a_fac - step * (grad_c @ b_fac.T)
            b_fac = b_fac - step * (a_fac.T @ grad_c)
        new_w = w + unit_mask * (a_fac @ b_fac)
        _set_matrix(corrected, name, new_w)
    return corrected


def _zero_unit_mask(w: np.ndarray, name: str) -> np.ndarray:
    """Mask locking structurally zeroed units: rows (or columns) that are
    entirely zero stay zero under correction."""
    if DEFAULT_AXES[name] == "row":
        alive = np.any(w != 0.0, axis=1).astype(np.float64)
        return np.broadcast_to(alive[:, None], w.shape).copy()
    alive = np.any(w != 0.0, axis=0).astype(np.float64)
    return np.broadcast_to(alive[None, :], w.shape).copy()


def _block_io(block, rec: BlockActivations) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    if isinstance(block, FfnBlock):
        return {
            "w1": (block.w1, rec.input_pre, rec.z_pre),
            "w2": (block.w2, rec.a_pre, rec.out_pre),
        }
    return {
        "wq": (block.wq, rec.input_pre, rec.z_pre),
        "wk": (block.wk, rec.input_pre, rec.z_pre),
        "wv": (block.wv, rec.a_pre, rec.a_attn_pre),
        "wo": (block.wo, rec.a_attn_pre, rec.out_pre),
    }


def _set_matrix(block, name: str, value: np.ndarray):
    setattr(block, name, value)
