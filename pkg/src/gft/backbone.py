"""Frozen pre-norm transformer encoder for point-token sequences, plus the
binary checkpoint format.

The encoder itself is task-agnostic: it maps an EmbeddingMatrix through F
identical self-attention blocks. Callers can install hooks that rewrite
the running embedding just before selected layers (that is how the graph
feature interactions get injected) and can tap intermediate outputs (that
is how the segmentation decoder reads mid-stack features).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import ParamTensor, Tensor
from .pointops import EmbeddingMatrix


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files or name/shape mismatches."""


@dataclass
class BackboneConfig:
    embed_dim: int = 384
    num_layers: int = 12
    num_heads: int = 6
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"num_heads={self.num_heads} must divide embed_dim={self.embed_dim}")
        if self.num_layers < 1:
            raise ValueError("need at least one encoder layer")


@dataclass
class EncoderLayerWeights:
    """One pre-norm block: LN -> attention -> residual, LN -> MLP -> residual.

    Every tensor here is frozen; the whole point of the tuning scheme is
    that the encoder never receives optimizer updates.
    """

    norm1_gain: ParamTensor
    norm1_bias: ParamTensor
    q_weight: ParamTensor
    q_bias: ParamTensor
    k_weight: ParamTensor
    k_bias: ParamTensor
    v_weight: ParamTensor
    v_bias: ParamTensor
    out_weight: ParamTensor
    out_bias: ParamTensor
    norm2_gain: ParamTensor
    norm2_bias: ParamTensor
    mlp1_weight: ParamTensor
    mlp1_bias: ParamTensor
    mlp2_weight: ParamTensor
    mlp2_bias: ParamTensor

    def __post_init__(self):
        thawed = [p.name for p in self.parameters() if not p.frozen]
        if thawed:
            raise ValueError(f"encoder layer weights must be frozen, got trainable {thawed}")

    def parameters(self) -> list[ParamTensor]:
        return [
            self.norm1_gain, self.norm1_bias,
            self.q_weight, self.q_bias, self.k_weight, self.k_bias,
            self.v_weight, self.v_bias, self.out_weight, self.out_bias,
            self.norm2_gain, self.norm2_bias,
            self.mlp1_weight, self.mlp1_bias, self.mlp2_weight, self.mlp2_bias,
        ]


def init_encoder_layer(rng: np.random.Generator, cfg: BackboneConfig, index: int,
                       std: float = 0.02, dtype=np.float64) -> EncoderLayerWeights:
    d = cfg.embed_dim
    m = cfg.mlp_ratio * d
    pre = f"encoder.layer{index:02d}"

    def w(name, shape):
        return nc.param(f"{pre}.{name}", rng.normal(0.0, std, shape).astype(dtype), frozen=True)

    def zero(name, shape):
        return nc.param(f"{pre}.{name}", np.zeros(shape, dtype=dtype), frozen=True)

    def one(name, shape):
        return nc.param(f"{pre}.{name}", np.ones(shape, dtype=dtype), frozen=True)

    return EncoderLayerWeights(
        norm1_gain=one("norm1.gain", d), norm1_bias=zero("norm1.bias", d),
        q_weight=w("attn.q.weight", (d, d)), q_bias=zero("attn.q.bias", d),
        k_weight=w("attn.k.weight", (d, d)), k_bias=zero("attn.k.bias", d),
        v_weight=w("attn.v.weight", (d, d)), v_bias=zero("attn.v.bias", d),
        out_weight=w("attn.out.weight", (d, d)), out_bias=zero("attn.out.bias", d),
        norm2_gain=one("norm2.gain", d), norm2_bias=zero("norm2.bias", d),
        mlp1_weight=w("mlp.fc1.weight", (d, m)), mlp1_bias=zero("mlp.fc1.bias", m),
        mlp2_weight=w("mlp.fc2.weight", (m, d)), mlp2_bias=zero("mlp.fc2.bias", d),
    )


def init_backbone(rng: np.random.Generator, cfg: BackboneConfig,
                  std: float = 0.02, dtype=np.float64) -> list[EncoderLayerWeights]:
    """Seeded random frozen encoder stack for desk-scale runs (used when no
    pretrained checkpoint is supplied)."""
    return [init_encoder_layer(rng, cfg, i + 1, std, dtype) for i in range(cfg.num_layers)]


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
                         capture: dict | None = None) -> Tensor:
    """Multi-head scaled dot-product attention on projected inputs.

    q is (R, d), k and v are (S, d); d split evenly across heads. If
    ``capture`` is given, the softmax probabilities are copied into it as
    a (num_heads, R, S) array under key "probs" (values only, off-tape).
    """
    d = q.shape[1]
    if d % num_heads != 0:
        raise nc.ShapeError(f"heads {num_heads} must divide attention width {d}")
    if k.shape != v.shape or k.shape[1] != d:
        raise nc.ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    dh = d // num_heads
    inv = 1.0 / np.sqrt(dh)
    ctx = []
    probs_out = [] if capture is not None else None
    for h in range(num_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = nc.slice_cols(q, lo, hi)
        kh = nc.slice_cols(k, lo, hi)
        vh = nc.slice_cols(v, lo, hi)
        scores = nc.scale(nc.matmul(qh, nc.transpose(kh)), inv)
        probs = nc.softmax(scores, axis=-1)
        if probs_out is not None:
            probs_out.append(probs.values.copy())
        ctx.append(nc.matmul(probs, vh))
    if capture is not None:
        capture["probs"] = np.stack(probs_out)
    return nc.concat(ctx, axis=1)


def attention_block(x: Tensor, w, num_heads: int, capture: dict | None = None) -> Tensor:
    """Pre-norm transformer block on a plain (R, D) tensor:
    x + Attn(LN(x)), then + MLP(LN(.)). ``w`` is any object carrying the
    EncoderLayerWeights field names; the segmentation decoder reuses this
    with trainable weights."""
    h = nc.layer_norm(x, w.norm1_gain.tensor, w.norm1_bias.tensor)
    q = nc.add_bias(nc.matmul(h, w.q_weight.tensor), w.q_bias.tensor)
    k = nc.add_bias(nc.matmul(h, w.k_weight.tensor), w.k_bias.tensor)
    v = nc.add_bias(nc.matmul(h, w.v_weight.tensor), w.v_bias.tensor)
    ctx = scaled_dot_attention(q, k, v, num_heads, capture=capture)
    attn = nc.add_bias(nc.matmul(ctx, w.out_weight.tensor), w.out_bias.tensor)
    x = nc.add(x, attn)
    h2 = nc.layer_norm(x, w.norm2_gain.tensor, w.norm2_bias.tensor)
    mid = nc.gelu(nc.add_bias(nc.matmul(h2, w.mlp1_weight.tensor), w.mlp1_bias.tensor))
    mlp = nc.add_bias(nc.matmul(mid, w.mlp2_weight.tensor), w.mlp2_bias.tensor)
    return nc.add(x, mlp)


def self_attention_layer(e: EmbeddingMatrix, w: EncoderLayerWeights, num_heads: int,
                         capture: dict | None = None) -> EmbeddingMatrix:
    """One encoder block over an embedding, layout preserved."""
    return EmbeddingMatrix(attention_block(e.data, w, num_heads, capture),
                           e.num_prompts, e.num_patches)


def encode(e0: EmbeddingMatrix, layers: list[EncoderLayerWeights], num_heads: int,
           hooks: dict | None = None, taps=(), attention_taps=()):
    """Run the encoder stack with optional per-layer hooks and taps.

    Layers are indexed 1..F. ``hooks[i]`` receives the running embedding
    just before layer i and must return one of identical shape (the row
    layout must survive every rewrite). ``taps`` lists layer indices whose
    outputs to collect; ``attention_taps`` collects (H, R, R) attention
    probability arrays. Returns (final, {i: EmbeddingMatrix}, {i: ndarray}).
    """
    f = len(layers)
    hooks = dict(hooks or {})
    taps = set(taps)
    attention_taps = set(attention_taps)
    for where, idxs in (("hook", hooks), ("tap", taps), ("attention tap", attention_taps)):
        bad = [i for i in idxs if not 1 <= i <= f]
        if bad:
            raise ValueError(f"{where} layer indices {sorted(bad)} outside [1, {f}]")
    e = e0
    collected: dict[int, EmbeddingMatrix] = {}
    attention: dict[int, np.ndarray] = {}
    for i in range(1, f + 1):
        if i in hooks:
            rewritten = hooks[i](e)
            if rewritten.data.shape != e.data.shape or rewritten.num_prompts != e.num_prompts:
                raise ValueError(
                    f"hook at layer {i} changed the embedding layout: "
                    f"{e.data.shape} -> {rewritten.data.shape}")
            e = rewritten
        cap = {} if i in attention_taps else None
        e = self_attention_layer(e, layers[i - 1], num_heads, capture=cap)
        if cap is not None:
            attention[i] = cap["probs"]
        if i in taps:
            collected[i] = e
    return e, collected, attention


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------
# layout (all integers little-endian):
#   magic   4 bytes  b"GFTC"
#   version u8       currently 1
#   count   u32
#   per tensor:
#     name_len u16, name utf-8
#     frozen   u8 (0 or 1)
#     dtype    u8 (0 = float32, 1 = float64)
#     ndim     u8, then ndim x u32 dims
#     payload  float32 little-endian, row-major
# Payloads are stored at float32 regardless of compute dtype; the round
# trip is bit-exact at float32 precision.

CHECKPOINT_MAGIC = b"GFTC"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.float32, 1: np.float64}


def save_checkpoint(path, params: list[ParamTensor]) -> None:
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise CheckpointError(f"duplicate parameter names: {dupes}")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<BI", CHECKPOINT_VERSION, len(params)))
        for p in params:
            raw = p.name.encode("utf-8")
            arr = p.tensor.values
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BBB", int(p.frozen), _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path, params: list[ParamTensor]) -> None:
    """Restore values and frozen flags into ``params`` in place.

    The file must cover exactly the given parameter set: names present in
    the file but not the model (or vice versa) are an error listing them.
    """
    by_name = {p.name: p for p in params}
    if len(by_name) != len(params):
        raise CheckpointError("model has duplicate parameter names")
    seen = set()
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic: not a checkpoint file")
        version, count = struct.unpack("<BI", _read_exact(fh, 5))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            frozen, code, ndim = struct.unpack("<BBB", _read_exact(fh, 3))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            n_items = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = np.frombuffer(_read_exact(fh, 4 * n_items), dtype="<f4").reshape(shape)
            if name not in by_name:
                raise CheckpointError(f"unknown parameter in checkpoint: {name!r}")
            if name in seen:
                raise CheckpointError(f"duplicate parameter in checkpoint: {name!r}")
            seen.add(name)
            p = by_name[name]
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"bad dtype code {code} for {name!r}")
            if tuple(shape) != p.tensor.values.shape:
                raise CheckpointError(
                    f"shape mismatch for {name!r}: file {tuple(shape)}, "
                    f"model {p.tensor.values.shape}")
            p.tensor.values = payload.astype(_CODE_DTYPES[code])
            p.set_frozen(bool(frozen))
        if fh.read(1):
            raise CheckpointError("trailing bytes after last tensor")
    missing = sorted(set(by_name) - seen)
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {missing}")
