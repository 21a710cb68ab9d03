"""Outcome measurement: reconstruction loss, toy-scale pseudo-perplexity,
the analytic parameter/memory tables, and report emission.

The memory table reproduces the reference figures exactly at their printed
precision: parameters per layer are total/L rounded half-even to one
decimal in millions, and FP16 megabytes per layer are exactly twice that
printed value.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, ParameterError
from .model import (
    FFN,
    MHA,
    ActivationCache,
    CalibrationSet,
    FfnBlock,
    MhaBlock,
    ToyModel,
    calibration_input,
)


@dataclass
class LossReport:
    per_layer: list[tuple[int, str, float]]
    total: float


def total_reconstruction_loss(
    model_pruned: ToyModel,
    model_dense: ToyModel,
    cache: ActivationCache,
    alpha: float = 1.0,
) -> LossReport:
    """Layer reconstruction loss against the frozen dense reference,
    normalized by the calibration sample count.

    Per FFN block: alpha * (||dense down product - pruned down product||^2
    + ||dense up product - pruned up product||^2) on the reference
    activations. MHA blocks compare the output projection, the value
    projection, and the shared query/key consensus. Zero iff the pruned
    weights act identically to the dense ones on the calibration support.
    """
    if len(model_pruned.blocks) != len(model_dense.blocks):
        raise ParameterError("pruned and dense models disagree on block count")
    inv_n = 1.0 / float(cache.n_samples)
    per_layer: list[tuple[int, str, float]] = []
    for i, (pb, db) in enumerate(zip(model_pruned.blocks, model_dense.blocks)):
        rec = cache.blocks[i]
        if isinstance(db, FfnBlock):
            up = _sq(db.w1 @ rec.input_pre - pb.w1 @ rec.input_pre)
            down = _sq(db.w2 @ rec.a_pre - pb.w2 @ rec.a_pre)
            loss = alpha * inv_n * (up + down)
        else:
            cons_dense = 0.5 * (db.wq @ rec.input_pre + db.wk @ rec.input_pre)
            cons_pruned = 0.5 * (pb.wq @ rec.input_pre + pb.wk @ rec.input_pre)
            qk = _sq(cons_dense - cons_pruned)
            val = _sq(db.wv @ rec.a_pre - pb.wv @ rec.a_pre)
            out = _sq(db.wo @ rec.a_attn_pre - pb.wo @ rec.a_attn_pre)
            loss = alpha * inv_n * (qk + val + out)
        per_layer.append((i, db.kind, float(loss)))
    return LossReport(per_layer, float(sum(l for _, _, l in per_layer)))


def _sq(a: np.ndarray) -> float:
    return float(np.sum(a * a))


def pseudo_perplexity(model: ToyModel, calib: CalibrationSet) -> float:
    """exp of the mean next-token cross-entropy through the linear vocab
    head. Equals the vocab size for a uniform-output model and is
    invariant to adding a constant to all logits."""
    if model.head is None or model.embed is None:
        raise CapabilityError("pseudo-perplexity needs a model with a vocab head")
    if not calib.is_tokens:
        raise CapabilityError("pseudo-perplexity needs token calibration data")
    if calib.seq_len < 2:
        raise ParameterError("token sequences must have length >= 2 for next-token loss")
    from .model import ffn_forward, mha_forward

    x = calibration_input(model, calib)
    for block in model.blocks:
        if isinstance(block, FfnBlock):
            _, _, x = ffn_forward(block, x)
        else:
            _, _, _, x = mha_forward(block, x, calib.seq_len)
    logits = model.head @ x  # (vocab, tokens)
    logits = logits - logits.max(axis=0, keepdims=True)
    logz = np.log(np.sum(np.exp(logits), axis=0))
    n, seq = calib.n_samples, calib.seq_len
    total = 0.0
    count = 0
    for s in range(n):
        for p in range(seq - 1):
            col = s * seq + p
            target = calib.tokens[s, p + 1]
            total += logz[col] - logits[target, col]
            count += 1
    return float(math.exp(total / count))


def achieved_sparsity(model: ToyModel) -> list[tuple[int, str, float]]:
    """Fraction of structured units whose weights are exactly zero,
    averaged over the block's mask-bearing matrices."""
    out = []
    for i, block in enumerate(model.blocks):
        if isinstance(block, FfnBlock):
            fracs = [float(np.mean(~np.any(block.w1 != 0.0, axis=1)))]
        else:
            fracs = [
                float(np.mean(~np.any(m != 0.0, axis=1)))
                for m in (block.wq, block.wk, block.wv)
            ]
        out.append((i, block.kind, float(np.mean(fracs))))
    return out


# ---------------------------------------------------------------------------
# Analytic parameter / memory model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MemoryConfig:
    name: str
    total_params: float
    num_layers: int
    hidden_dim: int
    total_display: str = ""


@dataclass(frozen=True)
class MemoryRow:
    name: str
    total_display: str
    num_layers: int
    params_per_layer_m: float
    mem_per_layer_mb: float
    ffn_params: int
    mha_params: int
    ratio: float


# Published OPT family figures used as the reference fixture.
OPT_CONFIGS = [
    MemoryConfig("OPT-125M", 0.125e9, 12, 768, "0.125B"),
    MemoryConfig("OPT-350M", 0.350e9, 24, 1024, "0.350B"),
    MemoryConfig("OPT-1.3B", 1.3e9, 24, 2048, "1.3B"),
    MemoryConfig("OPT-2.7B", 2.7e9, 32, 2560, "2.7B"),
    MemoryConfig("OPT-6.7B", 6.7e9, 32, 4096, "6.7B"),
    MemoryConfig("OPT-13B", 13e9, 40, 5120, "13B"),
    MemoryConfig("OPT-30B", 30e9, 48, 7168, "30B"),
    MemoryConfig("OPT-66B", 66e9, 64, 9216, "66B"),
]


def memory_report(configs: list[MemoryConfig] | None = None) -> list[MemoryRow]:
    if configs is None:
        configs = OPT_CONFIGS
    rows = []
    for cfg in configs:
        params_m = round(cfg.total_params / cfg.num_layers / 1e6, 1)
        mem_mb = round(params_m * 2.0, 1)  # FP16: two bytes per parameter
        ffn = 8 * cfg.hidden_dim * cfg.hidden_dim
        mha = 4 * cfg.hidden_dim * cfg.hidden_dim
        rows.append(
            MemoryRow(
                cfg.name,
                cfg.total_display or f"{cfg.total_params / 1e9:g}B",
                cfg.num_layers,
                params_m,
                mem_mb,
                ffn,
                mha,
                ffn / mha,
            )
        )
    return rows


def export_memory_csv(rows: list[MemoryRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Model", "Tot. Params", "#Layers", "Params/L (M)", "Mem/L (MB)"])
    for r in rows:
        writer.writerow(
            [r.name, r.total_display, r.num_layers, f"{r.params_per_layer_m:.1f}", f"{r.mem_per_layer_mb:.1f}"]
        )
    return buf.getvalue()


def export_module_split_csv(rows: list[MemoryRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Model", "Hidden Size d", "FFN Params (8d^2)", "MHA Params (4d^2)", "FFN:MHA Ratio"])
    for r in rows:
        d = int(round(math.sqrt(r.ffn_params / 8)))
        writer.writerow([r.name, f"{d:,}", f"{r.ffn_params:,}", f"{r.mha_params:,}", f"{r.ratio:.2f}"])
    return buf.getvalue()


@dataclass(frozen=True)
class ScalingReport:
    slope_layers: float
    slope_params_per_layer: float


def scaling_report(configs: list[MemoryConfig]) -> ScalingReport:
    """Log-log OLS slopes of layer count and of parameters-per-layer
    against total parameter count."""
    if len(configs) < 3:
        raise ParameterError("scaling regression needs at least 3 configs")
    x = np.log([c.total_params for c in configs])
    y_layers = np.log([c.num_layers for c in configs])
    y_width = np.log([c.total_params / c.num_layers for c in configs])
    return ScalingReport(_ols_slope(x, y_layers), _ols_slope(x, y_width))


def _ols_slope(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    return float(np.dot(dx, dy) / np.dot(dx, dx))


# ---------------------------------------------------------------------------
# Evaluation report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    per_layer_loss: list[tuple[int, str, float]]
    total_loss: float
    sparsity_per_layer: list[tuple[int, str, float]]
    pseudo_perplexity: float | None = None
    config: dict = field(default_factory=dict)
    wall_time_s: float | None = None

    def to_json(self) -> str:
        """Deterministic serialization; wall time is volatile and stays
        out of the artifact."""
        payload = {
            "per_layer_loss": [
                {"layer": l, "block_kind": k, "loss": v} for l, k, v in self.per_layer_loss
            ],
            "total_loss": self.total_loss,
            "sparsity_per_layer": [
                {"layer": l, "block_kind": k, "sparsity": v}
                for l, k, v in self.sparsity_per_layer
            ],
            "pseudo_perplexity": self.pseudo_perplexity,
            "config": self.config,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"
