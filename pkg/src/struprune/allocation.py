"""Sparsity allocation and structured-mask construction.

Two families of machinery live here. The closed-form side scores units
from the per-unit quadratic context (b, c, d, z_pre) and derives both the
continuous stationary mask and the layer retention. The energy side turns
layer importance into sparsity via the temperature-controlled negative
softmax, with the post-correction and inverse-weighting variants, plus a
temperature grid search scored by reconstruction loss.

Naming convention for the two readings of the allocated quantity: the
closed-form retention rho is mask density (fraction kept); the softmax
allocators produce sparsity s = 1 - rho and prune more where importance is
lower. Plan entries always carry both; mask construction consumes rho.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import ParameterError
from .evaluation import total_reconstruction_loss
from .importance import (
    DEFAULT_AXES,
    MASK_BEARING,
    block_unit_scores,
    layer_importance,
)
from .linalg import softmax_vec
from .model import FFN, MHA, ActivationCache, FfnBlock, MhaBlock, ToyModel

SPARSITY_CAP = 0.95
HEAD_AXIS = "head"


def round_half_away(x: float) -> int:
    """round() ties go to even; mask budgets round half away from zero."""
    return int(math.floor(x + 0.5))


# ---------------------------------------------------------------------------
# Closed-form unit scores, retention and the relaxed mask
# ---------------------------------------------------------------------------


@dataclass
class ClosedFormContext:
    """Per-unit quadratic context. The mask-dependent layer loss is
    sum_j (b_j - M_j c_j)^2 + (z_pre_j - M_j d_j)^2."""

    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    z_pre: np.ndarray
    layer: int = -1
    matrix: str = ""
    degenerate_d: bool = False

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64).ravel()
        self.c = np.asarray(self.c, dtype=np.float64).ravel()
        self.d = np.asarray(self.d, dtype=np.float64).ravel()
        self.z_pre = np.asarray(self.z_pre, dtype=np.float64).ravel()
        n = self.b.size
        if not (self.c.size == self.d.size == self.z_pre.size == n):
            raise ParameterError("context vectors must share one length")
        if n == 0:
            raise ParameterError("context must cover at least one unit")

    @property
    def n_units(self) -> int:
        return self.b.size

    def weights(self) -> np.ndarray:
        return self.c * self.c + self.d * self.d

    def mask_loss(self, mask: np.ndarray) -> float:
        """Exact layer loss of a (possibly fractional) mask."""
        m = np.asarray(mask, dtype=np.float64).ravel()
        return float(
            np.sum((self.b - m * self.c) ** 2) + np.sum((self.z_pre - m * self.d) ** 2)
        )


def closed_form_context(
    model: ToyModel,
    cache: ActivationCache,
    layer: int,
    matrix: str | None = None,
    teacher: np.ndarray | None = None,
) -> ClosedFormContext:
    """Build the per-unit context for one mask-bearing matrix from model
    state, averaging the bracketed products over calibration tokens.

    The coupling term d needs a downstream matrix acting on this matrix's
    output units; that product only conforms on a square chain, so it is
    live for FFN up-projections when ffn_dim == d and zero otherwise (the
    documented degenerate form, same as a last layer without successor).
    """
    block = model.blocks[layer]
    rec = cache.blocks[layer]
    if matrix is None:
        matrix = MASK_BEARING[block.kind][0]
    if matrix not in MASK_BEARING[block.kind]:
        raise ParameterError(f"matrix {matrix!r} carries no unit mask on a {block.kind} block")
    w_hat = block.matrices[matrix]
    if matrix in ("w1", "wq", "wk"):
        x_cur = rec.input_pre
        x_pre = rec.input_pre
    else:  # wv: input is the current attention-probability iterate
        x_cur = rec.a
        x_pre = rec.a_pre
    w_teach = w_hat if teacher is None else teacher
    b = (w_teach @ x_cur).mean(axis=1)
    c = (w_hat @ x_pre).mean(axis=1)
    n = b.size
    square_ffn = (
        block.kind == FFN and matrix == "w1" and model.arch.ffn_dim == model.arch.d
    )
    if square_ffn:
        d_vec = (block.w2 @ rec.a).mean(axis=1)
        z_pre = rec.out_pre.mean(axis=1)
        degenerate = False
    else:
        d_vec = np.zeros(n)
        z_pre = np.zeros(n)
        degenerate = True
    return ClosedFormContext(b, c, d_vec, z_pre, layer, matrix, degenerate)


def unit_scores_closed_form(ctx: ClosedFormContext) -> np.ndarray:
    """s_j = (c_j b_j + d_j z_pre_j) / (c_j^2 + d_j^2); units with zero
    weight score 0 (their loss is mask-independent)."""
    v = ctx.weights()
    s = np.zeros(ctx.n_units)
    live = v > 0
    s[live] = (ctx.c[live] * ctx.b[live] + ctx.d[live] * ctx.z_pre[live]) / v[live]
    return s


class RetentionResult(NamedTuple):
    value: float
    raw: float
    clamped: bool


def closed_form_retention(ctx: ClosedFormContext) -> RetentionResult:
    """Mean unit score, clamped to [0, 1] with a flag when the raw mean
    leaves the interval (the multiplier-free derivation does not guarantee
    feasibility)."""
    raw = float(unit_scores_closed_form(ctx).mean())
    value = min(max(raw, 0.0), 1.0)
    return RetentionResult(value, raw, value != raw)


def relaxed_mask(ctx: ClosedFormContext, retention: float) -> np.ndarray:
    """Continuous stationary mask meeting sum(M) = retention * n.

    Each live entry solves the per-unit Lagrangian stationarity condition;
    degenerate units are excluded from the multiplier sum and pinned to 0.
    """
    v = ctx.weights()
    live = v > 0
    if not np.any(live):
        raise ParameterError("all units degenerate: c and d vanish everywhere")
    n = ctx.n_units
    s = unit_scores_closed_form(ctx)
    inv_v = np.zeros(n)
    inv_v[live] = 1.0 / v[live]
    correction = (s[live].sum() - retention * n) / inv_v[live].sum()
    mask = np.zeros(n)
    mask[live] = s[live] - inv_v[live] * correction
    return mask


def recover_multiplier(ctx: ClosedFormContext, retention: float) -> float:
    """Lagrange multiplier consistent with the relaxed mask's budget."""
    v = ctx.weights()
    live = v > 0
    s = unit_scores_closed_form(ctx)
    return 2.0 * (s[live].sum() - retention * ctx.n_units) / (1.0 / v[live]).sum()


@dataclass
class PruneMask:
    block: int
    matrix: str
    axis: str
    bits: np.ndarray
    k: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).ravel()
        if int(self.bits.sum()) != self.k:
            raise ParameterError(
                f"mask popcount {int(self.bits.sum())} != declared retained count {self.k}"
            )

    @property
    def n_units(self) -> int:
        return self.bits.size


def binarize_by_threshold(scores, k: int, block: int = -1, matrix: str = "", axis: str = "row") -> PruneMask:
    """Retain the k highest-scoring units; ties keep the lower index."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    n = s.size
    if not 0 <= k <= n:
        raise ParameterError(f"retained count {k} outside [0, {n}]")
    bits = np.zeros(n, dtype=bool)
    if k > 0:
        order = np.argsort(-s, kind="stable")
        bits[order[:k]] = True
    return PruneMask(block, matrix, axis, bits, k)


# ---------------------------------------------------------------------------
# Sparsity plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanEntry:
    layer: int
    block_kind: str
    importance: float
    temperature: float
    retention: float
    sparsity: float
    allocator: str


@dataclass
class SparsityPlan:
    entries: list[PlanEntry]

    def sparsities(self) -> np.ndarray:
        return np.array([e.sparsity for e in self.entries])

    def retention_for(self, layer: int) -> float:
        for e in self.entries:
            if e.layer == layer:
                return e.retention
        raise ParameterError(f"plan has no entry for layer {layer}")

    def mean_sparsity(self) -> float:
        return float(self.sparsities().mean())


def _entry(layer, kind, imp, temp, sparsity, allocator) -> PlanEntry:
    retention = 1.0 - min(max(sparsity, 0.0), 1.0)
    return PlanEntry(layer, kind, float(imp), float(temp), retention, float(sparsity), allocator)


def softmax_allocate(
    importances,
    r_bar: float,
    temperature: float,
    kinds: list[str] | None = None,
    allocator: str = "softmax",
) -> SparsityPlan:
    """Raw energy allocation: sparsity_l = r_bar * L * softmax(-I/T).

    The values sum to r_bar * L exactly; individual entries may leave
    [0, 1] and post_correct is responsible for clipping."""
    imps = np.asarray(importances, dtype=np.float64).ravel()
    n_layers = imps.size
    if n_layers == 0:
        raise ParameterError("allocation needs at least one layer")
    if not 0.0 < r_bar < 1.0:
        raise ParameterError(f"global sparsity target must be in (0, 1), got {r_bar}")
    weights = softmax_vec(imps, temperature)
    raw = r_bar * n_layers * weights
    if kinds is None:
        kinds = [""] * n_layers
    entries = [
        _entry(i, kinds[i], imps[i], temperature, raw[i], allocator) for i in range(n_layers)
    ]
    return SparsityPlan(entries)


def post_correct(plan: SparsityPlan, r_bar: float, cap: float = SPARSITY_CAP) -> SparsityPlan:
    """Clip to [0, cap]; only when no entry exceeded the cap, rescale all
    entries by r_bar / mean and clip once more."""
    if not plan.entries:
        raise ParameterError("plan is empty")
    raw = plan.sparsities()
    clipped = np.clip(raw, 0.0, cap)
    cap_hit = bool(np.any(raw > cap))
    if not cap_hit:
        mean = clipped.mean()
        if mean == 0.0 and r_bar != 0.0:
            raise ParameterError("cannot rescale a plan with zero mean sparsity")
        rescaled = clipped * (r_bar / mean)
        clipped = np.clip(rescaled, 0.0, cap)
    entries = [
        replace(
            e,
            sparsity=float(clipped[i]),
            retention=1.0 - float(clipped[i]),
            allocator=e.allocator + "+post",
        )
        for i, e in enumerate(plan.entries)
    ]
    return SparsityPlan(entries)


def inverse_weight_allocate(
    attn_importances,
    mlp_importances,
    r_bar: float,
    temperature: float,
    cap: float = SPARSITY_CAP,
    attn_layers: list[int] | None = None,
    mlp_layers: list[int] | None = None,
) -> SparsityPlan:
    """Per-family inverse weighting: sparsity_l = clip(r_bar * L_f *
    (1 - w_l) / sum_j (1 - w_j), 0, cap) with w the negative softmax of
    the family's importances."""
    if not 0.0 < r_bar < 1.0:
        raise ParameterError(f"global sparsity target must be in (0, 1), got {r_bar}")
    entries: list[PlanEntry] = []
    families = [
        (MHA, np.asarray(attn_importances, dtype=np.float64).ravel(), attn_layers),
        (FFN, np.asarray(mlp_importances, dtype=np.float64).ravel(), mlp_layers),
    ]
    for kind, imps, layers in families:
        n_family = imps.size
        if n_family < 2:
            raise ParameterError(
                f"inverse weighting needs >= 2 {kind} layers; the 1-w transform degenerates"
            )
        if layers is None:
            layers = list(range(n_family))
        w = softmax_vec(imps, temperature)
        inv = 1.0 - w
        raw = r_bar * n_family * inv / inv.sum()
        vals = np.clip(raw, 0.0, cap)
        for i in range(n_family):
            entries.append(
                _entry(layers[i], kind, imps[i], temperature, vals[i], "inverse-weight")
            )
    entries.sort(key=lambda e: e.layer)
    return SparsityPlan(entries)


def uniform_plan(model: ToyModel, r_bar: float, allocator: str = "uniform") -> SparsityPlan:
    if not 0.0 < r_bar < 1.0:
        raise ParameterError(f"global sparsity target must be in (0, 1), got {r_bar}")
    entries = [
        _entry(i, b.kind, 0.0, 0.0, r_bar, allocator) for i, b in enumerate(model.blocks)
    ]
    return SparsityPlan(entries)


def closed_form_plan(model: ToyModel, cache: ActivationCache, r_bar: float) -> SparsityPlan:
    """Retention per block from the closed-form mean score, rescaled so
    mean retention matches 1 - r_bar (the budget constraint), then clipped."""
    if not 0.0 < r_bar < 1.0:
        raise ParameterError(f"global sparsity target must be in (0, 1), got {r_bar}")
    rhos, imps = [], []
    for i, block in enumerate(model.blocks):
        per_matrix = [
            closed_form_retention(closed_form_context(model, cache, i, m)).value
            for m in MASK_BEARING[block.kind]
        ]
        rhos.append(float(np.mean(per_matrix)))
        imps.append(rhos[-1])
    rhos = np.asarray(rhos)
    target = 1.0 - r_bar
    mean = rhos.mean()
    if mean > 0:
        rhos = np.clip(rhos * (target / mean), 0.0, 1.0)
    else:
        rhos = np.full(len(rhos), target)
    entries = [
        _entry(i, b.kind, imps[i], 0.0, 1.0 - float(rhos[i]), "closed-form")
        for i, b in enumerate(model.blocks)
    ]
    return SparsityPlan(entries)


def allocate_plan(
    model: ToyModel,
    cache: ActivationCache,
    method: str,
    r_bar: float,
    temperature: float = 1.0,
    gamma: float = 1.0,
    rho: float = 1.0,
) -> SparsityPlan:
    """Method-dispatching plan builder used by the CLI and the sweep."""
    kinds = [b.kind for b in model.blocks]
    if method == "softmax":
        imps = [li.value for li in layer_importance(model, cache, "wanda-sum")]
        return post_correct(softmax_allocate(imps, r_bar, temperature, kinds), r_bar)
    if method == "inverse-weight":
        lis = layer_importance(model, cache, "module-split", gamma=gamma, rho=rho)
        attn = [(li.layer, li.value) for li in lis if li.block_kind == MHA]
        mlp = [(li.layer, li.value) for li in lis if li.block_kind == FFN]
        return inverse_weight_allocate(
            [v for _, v in attn],
            [v for _, v in mlp],
            r_bar,
            temperature,
            attn_layers=[l for l, _ in attn],
            mlp_layers=[l for l, _ in mlp],
        )
    if method == "closed-form":
        return closed_form_plan(model, cache, r_bar)
    if method in ("magnitude", "snip", "l0", "wanda-local"):
        return uniform_plan(model, r_bar, allocator=method)
    raise ParameterError(f"unknown allocation method {method!r}")


# ---------------------------------------------------------------------------
# Mask construction and application
# ---------------------------------------------------------------------------

MASK_CRITERIA = ("closed-form", "wanda", "magnitude", "snip", "l0")


def build_masks(
    model: ToyModel,
    cache: ActivationCache,
    plan: SparsityPlan,
    criterion: str,
    rng: np.random.Generator | None = None,
    head_mode: bool = False,
) -> dict[int, dict[str, PruneMask]]:
    """One PruneMask per mask-bearing matrix per block, each at the
    block's planned retention. In head mode, attention blocks are pruned
    by whole heads: one head mask drives matched row slices of all three
    input projections (and the output-projection columns on apply)."""
    if criterion not in MASK_CRITERIA:
        raise ParameterError(f"unknown mask criterion {criterion!r}")
    masks: dict[int, dict[str, PruneMask]] = {}
    for i, block in enumerate(model.blocks):
        retention = plan.retention_for(i)
        if head_mode and isinstance(block, MhaBlock):
            masks[i] = _head_masks(model, cache, i, block, retention, criterion, rng)
            continue
        per_matrix: dict[str, PruneMask] = {}
        if criterion == "closed-form":
            scores = {
                m: unit_scores_closed_form(closed_form_context(model, cache, i, m))
                for m in MASK_BEARING[block.kind]
            }
            for m, s in scores.items():
                k = round_half_away(retention * s.size)
                per_matrix[m] = binarize_by_threshold(s, k, i, m, DEFAULT_AXES[m])
        else:
            for m, us in block_unit_scores(model, cache, i, criterion, rng).items():
                k = round_half_away(retention * us.scores.size)
                per_matrix[m] = binarize_by_threshold(us.scores, k, i, m, us.axis)
        masks[i] = per_matrix
    return masks


def _head_masks(
    model, cache, layer, block: MhaBlock, retention, criterion, rng
) -> dict[str, PruneMask]:
    """Whole-head masks: per-head scores summed over the projections,
    thresholded at the head budget, then broadcast to row masks."""
    num_heads = block.num_heads
    head_scores = np.zeros(num_heads)
    if criterion == "closed-form":
        for m in MASK_BEARING[MHA]:
            s = unit_scores_closed_form(closed_form_context(model, cache, layer, m))
            head_scores += s.reshape(num_heads, -1).sum(axis=1)
    else:
        for us in block_unit_scores(model, cache, layer, criterion, rng).values():
            head_scores += us.scores.reshape(num_heads, -1).sum(axis=1)
    k_heads = round_half_away(retention * num_heads)
    head_mask = binarize_by_threshold(head_scores, k_heads, layer, "heads", HEAD_AXIS)
    row_bits = np.repeat(head_mask.bits, block.wq.shape[0] // num_heads)
    k_rows = int(row_bits.sum())
    return {
        m: PruneMask(layer, m, DEFAULT_AXES[m], row_bits.copy(), k_rows)
        for m in MASK_BEARING[MHA]
    }


def global_closed_form_masks(
    model: ToyModel, cache: ActivationCache, r_bar: float
) -> tuple[dict[int, dict[str, PruneMask]], SparsityPlan]:
    """Single global threshold over all closed-form scores with a floored
    budget K = floor(retention * total_units); returns the induced plan."""
    if not 0.0 < r_bar < 1.0:
        raise ParameterError(f"global sparsity target must be in (0, 1), got {r_bar}")
    pooled = []
    for i, block in enumerate(model.blocks):
        for m in MASK_BEARING[block.kind]:
            s = unit_scores_closed_form(closed_form_context(model, cache, i, m))
            for j, val in enumerate(s):
                pooled.append((-float(val), i, m, j))
    pooled.sort()
    budget = int(math.floor((1.0 - r_bar) * len(pooled)))
    keep = set((i, m, j) for _, i, m, j in pooled[:budget])
    masks: dict[int, dict[str, PruneMask]] = {}
    entries = []
    for i, block in enumerate(model.blocks):
        per_matrix = {}
        kept_counts = []
        for m in MASK_BEARING[block.kind]:
            n = block.matrices[m].shape[0]
            bits = np.array([(i, m, j) in keep for j in range(n)])
            per_matrix[m] = PruneMask(i, m, DEFAULT_AXES[m], bits, int(bits.sum()))
            kept_counts.append(bits.mean())
        masks[i] = per_matrix
        rho = float(np.mean(kept_counts))
        entries.append(_entry(i, block.kind, 0.0, 0.0, 1.0 - rho, "closed-form-global"))
    return masks, SparsityPlan(entries)


def expand_mask(mask: PruneMask, shape: tuple[int, int]) -> np.ndarray:
    bits = mask.bits.astype(np.float64)
    if mask.axis == "row":
        return np.broadcast_to(bits[:, None], shape).copy()
    return np.broadcast_to(bits[None, :], shape).copy()


def apply_masks(model: ToyModel, masks: dict[int, dict[str, PruneMask]]) -> ToyModel:
    """Multiplicative structured zeroing; w2/wo columns follow the paired
    row mask (w1 for FFN, wv for MHA)."""
    pruned = model.copy()
    for i, per_matrix in masks.items():
        block = pruned.blocks[i]
        if isinstance(block, FfnBlock):
            bits = per_matrix["w1"].bits.astype(np.float64)
            block.w1 *= bits[:, None]
            block.w2 *= bits[None, :]
        elif isinstance(block, MhaBlock):
            block.wq *= per_matrix["wq"].bits.astype(np.float64)[:, None]
            block.wk *= per_matrix["wk"].bits.astype(np.float64)[:, None]
            vbits = per_matrix["wv"].bits.astype(np.float64)
            block.wv *= vbits[:, None]
            block.wo *= vbits[None, :]
    return pruned


# ---------------------------------------------------------------------------
# Temperature sweep
# ---------------------------------------------------------------------------


def default_temperature_grid(importances) -> list[float]:
    """{0.25, 0.5, 1, 2, 4} scaled by the mean absolute importance."""
    scale = float(np.mean(np.abs(np.asarray(importances, dtype=np.float64))))
    if scale == 0.0:
        scale = 1.0
    return [scale * f for f in (0.25, 0.5, 1.0, 2.0, 4.0)]


def temperature_sweep(
    model: ToyModel,
    cache: ActivationCache,
    grid,
    allocator: str,
    r_bar: float,
    gamma: float = 1.0,
    rho: float = 1.0,
    alpha: float = 1.0,
    mask_criterion: str = "wanda",
    threads: int = 1,
) -> tuple[float, SparsityPlan, list[tuple[float, float]]]:
    """Evaluate every temperature: allocate, mask, measure the total
    reconstruction loss of the masked model. Returns the argmin
    temperature (ties to the smallest), its plan, and the loss table."""
    grid = [float(t) for t in grid]
    if not grid:
        raise ParameterError("temperature grid is empty")

    def evaluate(temp: float) -> tuple[float, SparsityPlan]:
        plan = allocate_plan(model, cache, allocator, r_bar, temp, gamma, rho)
        masks = build_masks(model, cache, plan, mask_criterion)
        pruned = apply_masks(model, masks)
        loss = total_reconstruction_loss(pruned, model, cache, alpha=alpha).total
        return loss, plan

    results: list[tuple[float, float, SparsityPlan]] = []
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            for temp, (loss, plan) in zip(grid, pool.map(evaluate, grid)):
                results.append((temp, loss, plan))
    else:
        for temp in grid:
            loss, plan = evaluate(temp)
            results.append((temp, loss, plan))
    best_temp, _, best_plan = min(results, key=lambda r: (r[1], r[0]))
    table = [(temp, loss) for temp, loss, _ in results]
    return best_temp, best_plan, table


# ---------------------------------------------------------------------------
# CSV exports
# ---------------------------------------------------------------------------


def export_plan_csv(plan: SparsityPlan) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["layer", "block_kind", "importance", "temperature", "retention", "sparsity", "allocator"]
    )
    for e in plan.entries:
        writer.writerow(
            [
                e.layer,
                e.block_kind,
                repr(e.importance),
                repr(e.temperature),
                repr(e.retention),
                repr(e.sparsity),
                e.allocator,
            ]
        )
    return buf.getvalue()


def export_sweep_csv(table: list[tuple[float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["temperature", "total_loss"])
    for temp, loss in table:
        writer.writerow([repr(float(temp)), repr(float(loss))])
    return buf.getvalue()
