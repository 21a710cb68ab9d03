"""Toy decoder models, their on-disk format, calibration data, and the
dense-reference activation capture that every downstream solver consumes.

Activations are stored as (dim, tokens) float64 matrices with the token
columns of all calibration samples concatenated. Residual connections and
normalization layers are intentionally absent; blocks compose by feeding
each block's output straight into the next.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, DimensionError, FormatError, ParameterError
from .linalg import relu, row_softmax

FORMAT_VERSION = 1

FFN = "ffn"
MHA = "mha"


@dataclass(frozen=True)
class ModelArch:
    d: int
    num_layers: int
    num_heads: int
    ffn_dim: int = 0  # 0 means the 4*d default
    vocab: int = 0

    def __post_init__(self):
        if self.d < 1 or self.num_layers < 1 or self.num_heads < 1:
            raise ParameterError("d, num_layers and num_heads must be >= 1")
        if self.d % self.num_heads != 0:
            raise ParameterError(
                f"hidden dim {self.d} not divisible by num_heads {self.num_heads}"
            )
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.d)
        if self.ffn_dim < 1:
            raise ParameterError("ffn_dim must be >= 1")
        if self.vocab < 0:
            raise ParameterError("vocab must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.d // self.num_heads


@dataclass
class FfnBlock:
    w1: np.ndarray  # (ffn_dim, d) up projection
    w2: np.ndarray  # (d, ffn_dim) down projection

    kind = FFN

    @property
    def matrices(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "w2": self.w2}

    def param_count(self) -> int:
        return self.w1.size + self.w2.size

    def copy(self) -> "FfnBlock":
        return FfnBlock(self.w1.copy(), self.w2.copy())


@dataclass
class MhaBlock:
    wq: np.ndarray  # (d, d)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    num_heads: int

    kind = MHA

    @property
    def matrices(self) -> dict[str, np.ndarray]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}

    def param_count(self) -> int:
        return self.wq.size + self.wk.size + self.wv.size + self.wo.size

    def copy(self) -> "MhaBlock":
        return MhaBlock(
            self.wq.copy(), self.wk.copy(), self.wv.copy(), self.wo.copy(), self.num_heads
        )

    def head_slices(self) -> list[slice]:
        d_head = self.wq.shape[0] // self.num_heads
        return [slice(i * d_head, (i + 1) * d_head) for i in range(self.num_heads)]


Block = FfnBlock | MhaBlock


@dataclass
class ToyModel:
    arch: ModelArch
    blocks: list[Block]
    embed: np.ndarray | None = None  # (d, vocab)
    head: np.ndarray | None = None  # (vocab, d)

    def copy(self) -> "ToyModel":
        return ToyModel(
            self.arch,
            [b.copy() for b in self.blocks],
            None if self.embed is None else self.embed.copy(),
            None if self.head is None else self.head.copy(),
        )

    def named_matrices(self) -> list[tuple[str, np.ndarray]]:
        out = []
        if self.embed is not None:
            out.append(("embed", self.embed))
        for i, block in enumerate(self.blocks):
            for name, mat in block.matrices.items():
                out.append((f"layer{i}.{block.kind}.{name}", mat))
        if self.head is not None:
            out.append(("head", self.head))
        return out


@dataclass
class CalibrationSet:
    """N samples of seq_len tokens each: dense activations (N, seq_len, d)
    or integer token ids (N, seq_len) when a vocab head exists."""

    inputs: np.ndarray | None = None
    tokens: np.ndarray | None = None

    def __post_init__(self):
        if (self.inputs is None) == (self.tokens is None):
            raise ParameterError("calibration carries either dense inputs or tokens")
        if self.inputs is not None:
            self.inputs = np.asarray(self.inputs, dtype=np.float64)
            if self.inputs.ndim != 3 or self.inputs.shape[0] < 1:
                raise ParameterError("dense calibration must have shape (N, seq_len, d)")
        else:
            self.tokens = np.asarray(self.tokens, dtype=np.int64)
            if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
                raise ParameterError("token calibration must have shape (N, seq_len)")

    @property
    def n_samples(self) -> int:
        src = self.inputs if self.inputs is not None else self.tokens
        return src.shape[0]

    @property
    def seq_len(self) -> int:
        src = self.inputs if self.inputs is not None else self.tokens
        return src.shape[1]

    @property
    def is_tokens(self) -> bool:
        return self.tokens is not None


def generate_toy_model(arch: ModelArch, rng: np.random.Generator, layout: str = "decoder") -> ToyModel:
    """Draw a seeded toy model. Weights are zero-mean normal scaled by
    1/sqrt(fan_in); layout picks the block sequence per layer:
    "decoder" = MHA then FFN, "ffn" = FFN only, "mha" = MHA only."""

    def draw(rows: int, cols: int) -> np.ndarray:
        return rng.normal(0.0, 1.0, size=(rows, cols)) / np.sqrt(cols)

    blocks: list[Block] = []
    for _ in range(arch.num_layers):
        if layout in ("decoder", "mha"):
            blocks.append(
                MhaBlock(
                    draw(arch.d, arch.d),
                    draw(arch.d, arch.d),
                    draw(arch.d, arch.d),
                    draw(arch.d, arch.d),
                    arch.num_heads,
                )
            )
        if layout in ("decoder", "ffn"):
            blocks.append(FfnBlock(draw(arch.ffn_dim, arch.d), draw(arch.d, arch.ffn_dim)))
    if layout not in ("decoder", "ffn", "mha"):
        raise ParameterError(f"unknown layout {layout!r}")
    embed = head = None
    if arch.vocab > 0:
        embed = draw(arch.d, arch.vocab)
        head = draw(arch.vocab, arch.d)
    return ToyModel(arch, blocks, embed, head)


def make_calibration(
    arch: ModelArch, n_samples: int, seq_len: int, rng: np.random.Generator, kind: str = "dense"
) -> CalibrationSet:
    if n_samples < 1 or seq_len < 1:
        raise ParameterError("n_samples and seq_len must be >= 1")
    if kind == "dense":
        return CalibrationSet(inputs=rng.normal(0.0, 1.0, size=(n_samples, seq_len, arch.d)))
    if kind == "tokens":
        if arch.vocab < 2:
            raise CapabilityError("token calibration needs a vocab head (vocab >= 2)")
        return CalibrationSet(tokens=rng.integers(0, arch.vocab, size=(n_samples, seq_len)))
    raise ParameterError(f"unknown calibration kind {kind!r}")


def calibration_input(model: ToyModel, calib: CalibrationSet) -> np.ndarray:
    """First-block input as a (d, N*seq_len) column-per-token matrix."""
    if calib.is_tokens:
        if model.embed is None:
            raise CapabilityError("model has no embedding for token calibration")
        flat = calib.tokens.reshape(-1)
        if flat.min() < 0 or flat.max() >= model.arch.vocab:
            raise ParameterError("token ids outside vocab range")
        return model.embed[:, flat].copy()
    if calib.inputs.shape[2] != model.arch.d:
        raise DimensionError(
            f"calibration dim {calib.inputs.shape[2]} != model hidden dim {model.arch.d}"
        )
    return np.ascontiguousarray(calib.inputs.reshape(-1, model.arch.d).T)


# ---------------------------------------------------------------------------
# Forward pass and activation capture
# ---------------------------------------------------------------------------


def ffn_forward(block: FfnBlock, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (z, a, out): pre-activation, post-activation, block output."""
    z = block.w1 @ x
    a = relu(z)
    return z, a, block.w2 @ a


def mha_forward(
    block: MhaBlock, x: np.ndarray, seq_len: int | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (z, a, a_attn, out).

    z is the consensus of the query and key projections (the shared
    pre-logit both branches reconstruct), a = row softmax of z scaled by
    1/sqrt(head_dim) and normalized per sample segment, a_attn the value
    projection of a, out the output projection of a_attn.
    """
    d_head = block.wq.shape[0] // block.num_heads
    z = 0.5 * (block.wq @ x + block.wk @ x)
    a = row_softmax(z, scale=float(np.sqrt(d_head)), seg_len=seq_len)
    a_attn = block.wv @ a
    return z, a, a_attn, block.wo @ a_attn


@dataclass
class BlockActivations:
    """Per-block record: frozen dense-reference values plus the current
    iterates. The *_pre arrays are read-only after capture."""

    kind: str
    input_pre: np.ndarray
    z_pre: np.ndarray
    a_pre: np.ndarray
    out_pre: np.ndarray
    a_attn_pre: np.ndarray | None
    q_pre: np.ndarray | None = None
    k_pre: np.ndarray | None = None
    z: np.ndarray = field(default=None)
    a: np.ndarray = field(default=None)
    a_attn: np.ndarray | None = None

    def frozen_arrays(self):
        return (
            self.input_pre, self.z_pre, self.a_pre, self.out_pre,
            self.a_attn_pre, self.q_pre, self.k_pre,
        )

    def reset_iterates(self):
        self.z = self.z_pre.copy()
        self.a = self.a_pre.copy()
        self.a_attn = None if self.a_attn_pre is None else self.a_attn_pre.copy()


@dataclass
class ActivationCache:
    blocks: list[BlockActivations]
    n_samples: int
    seq_len: int

    def checksum(self) -> str:
        """Digest over every frozen reference array; any mutation of the
        pre values changes it."""
        h = hashlib.sha256()
        for rec in self.blocks:
            for arr in rec.frozen_arrays():
                if arr is not None:
                    h.update(arr.tobytes())
        return h.hexdigest()


def capture_reference_activations(model: ToyModel, calib: CalibrationSet) -> ActivationCache:
    """Single dense forward pass; freezes the reference values and seeds
    the current iterates equal to them."""
    x = calibration_input(model, calib)
    records: list[BlockActivations] = []
    for block in model.blocks:
        if block.kind == FFN:
            z, a, out = ffn_forward(block, x)
            rec = BlockActivations(FFN, x, z, a, out, None)
        else:
            z, a, a_attn, out = mha_forward(block, x, calib.seq_len)
            rec = BlockActivations(MHA, x, z, a, out, a_attn, block.wq @ x, block.wk @ x)
        for arr in rec.frozen_arrays():
            if arr is not None:
                arr.setflags(write=False)
        rec.reset_iterates()
        records.append(rec)
        x = out
    return ActivationCache(records, calib.n_samples, calib.seq_len)


# ---------------------------------------------------------------------------
# On-disk format: manifest.json + raw little-endian float32 blobs
# ---------------------------------------------------------------------------


def write_atomic(path: str, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json_atomic(path: str, obj):
    write_atomic(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _blob_bytes(mat: np.ndarray) -> bytes:
    return np.ascontiguousarray(mat, dtype="<f4").tobytes()


def _read_blob(path: str, rows: int, cols: int, name: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    expected = rows * cols * 4
    if len(raw) != expected:
        raise FormatError(
            f"blob for matrix {name!r} has {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(rows, cols)


def save_model(model: ToyModel, path: str):
    os.makedirs(path, exist_ok=True)
    entries = []
    for name, mat in model.named_matrices():
        fname = name.replace(".", "_") + ".bin"
        entries.append(
            {"name": name, "rows": int(mat.shape[0]), "cols": int(mat.shape[1]), "file": fname}
        )
        write_atomic(os.path.join(path, fname), _blob_bytes(mat))
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": {
            "d": model.arch.d,
            "L": model.arch.num_layers,
            "h": model.arch.num_heads,
            "ffn_dim": model.arch.ffn_dim,
            "vocab": model.arch.vocab,
        },
        "matrices": entries,
    }
    write_json_atomic(os.path.join(path, "manifest.json"), manifest)


def load_model(path: str) -> ToyModel:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FormatError(f"missing manifest.json under {path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"bad magic: format_version={manifest.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    arch_raw = manifest.get("arch", {})
    for key in ("d", "L", "h", "ffn_dim", "vocab"):
        if key not in arch_raw:
            raise FormatError(f"manifest arch missing field {key!r}")
    arch = ModelArch(
        d=arch_raw["d"],
        num_layers=arch_raw["L"],
        num_heads=arch_raw["h"],
        ffn_dim=arch_raw["ffn_dim"],
        vocab=arch_raw["vocab"],
    )
    entries = manifest.get("matrices", [])
    # Validate the whole manifest against the directory before any blob read.
    for entry in entries:
        blob = os.path.join(path, entry["file"])
        if not os.path.exists(blob):
            raise FormatError(f"manifest lists matrix {entry['name']!r} but {entry['file']} is missing")
        size = os.path.getsize(blob)
        expected = entry["rows"] * entry["cols"] * 4
        if size != expected:
            raise FormatError(
                f"blob for matrix {entry['name']!r} has {size} bytes, expected {expected}"
            )
    mats = {
        e["name"]: _read_blob(os.path.join(path, e["file"]), e["rows"], e["cols"], e["name"])
        for e in entries
    }

    blocks: list[Block] = []
    idx = 0
    while True:
        ffn_key = f"layer{idx}.{FFN}.w1"
        mha_key = f"layer{idx}.{MHA}.wq"
        if mha_key in mats:
            blocks.append(
                MhaBlock(
                    _pop(mats, f"layer{idx}.{MHA}.wq"),
                    _pop(mats, f"layer{idx}.{MHA}.wk"),
                    _pop(mats, f"layer{idx}.{MHA}.wv"),
                    _pop(mats, f"layer{idx}.{MHA}.wo"),
                    arch.num_heads,
                )
            )
        elif ffn_key in mats:
            blocks.append(
                FfnBlock(_pop(mats, f"layer{idx}.{FFN}.w1"), _pop(mats, f"layer{idx}.{FFN}.w2"))
            )
        else:
            break
        idx += 1
    # Models store one block per "layer{i}" slot; decoder layouts save MHA
    # and FFN under separate consecutive indices.
    embed = mats.pop("embed", None)
    head = mats.pop("head", None)
    if mats:
        raise FormatError(f"manifest lists unplaceable matrices: {sorted(mats)}")
    if not blocks:
        raise FormatError("manifest contains no decoder blocks")
    for i, block in enumerate(blocks):
        for name, mat in block.matrices.items():
            _check_block_shape(arch, block, name, mat, i)
    return ToyModel(arch, blocks, embed, head)


def _pop(mats: dict, key: str) -> np.ndarray:
    if key not in mats:
        raise FormatError(f"manifest incomplete: matrix {key!r} missing")
    return mats.pop(key)


def _check_block_shape(arch: ModelArch, block: Block, name: str, mat: np.ndarray, idx: int):
    if block.kind == FFN:
        want = (arch.ffn_dim, arch.d) if name == "w1" else (arch.d, arch.ffn_dim)
    else:
        want = (arch.d, arch.d)
    if mat.shape != want:
        raise FormatError(
            f"matrix layer{idx}.{block.kind}.{name} has shape {mat.shape}, manifest arch implies {want}"
        )


def save_calibration(calib: CalibrationSet, path: str, d: int):
    os.makedirs(path, exist_ok=True)
    if calib.is_tokens:
        blob = np.ascontiguousarray(calib.tokens, dtype="<u4").tobytes()
        sidecar = {
            "N": calib.n_samples,
            "seq_len": calib.seq_len,
            "d": d,
            "kind": "tokens",
        }
    else:
        blob = _blob_bytes(calib.inputs.reshape(-1, calib.inputs.shape[2]))
        sidecar = {"N": calib.n_samples, "seq_len": calib.seq_len, "d": d}
    write_atomic(os.path.join(path, "calib.bin"), blob)
    write_json_atomic(os.path.join(path, "calib.json"), sidecar)


def load_calibration(path: str) -> CalibrationSet:
    sidecar_path = os.path.join(path, "calib.json")
    if not os.path.exists(sidecar_path):
        raise FormatError(f"missing calib.json under {path}")
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    for key in ("N", "seq_len", "d"):
        if key not in sidecar:
            raise FormatError(f"calibration sidecar missing field {key!r}")
    n, seq, d = sidecar["N"], sidecar["seq_len"], sidecar["d"]
    blob_path = os.path.join(path, "calib.bin")
    if not os.path.exists(blob_path):
        raise FormatError("calibration blob calib.bin is missing")
    with open(blob_path, "rb") as fh:
        raw = fh.read()
    if sidecar.get("kind") == "tokens":
        expected = n * seq * 4
        if len(raw) != expected:
            raise FormatError(f"token blob has {len(raw)} bytes, expected {expected}")
        tokens = np.frombuffer(raw, dtype="<u4").astype(np.int64).reshape(n, seq)
        return CalibrationSet(tokens=tokens)
    expected = n * seq * d * 4
    if len(raw) != expected:
        raise FormatError(f"calibration blob has {len(raw)} bytes, expected {expected}")
    inputs = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, seq, d)
    return CalibrationSet(inputs=inputs)
