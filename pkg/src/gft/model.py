"""The graph-feature tuning mechanism.

A frozen transformer encoder is adapted to a new task by training only a
small sidecar: learnable prompt tokens, an EdgeConv pyramid that extracts
graph features from the initial token set, and a handful of zero-initialized
cross-attention blocks that write those graph features back into the
embedding stream at selected layers. Because every write-back path starts
at an exactly-zero output projection, the adapted model is elementwise
identical to the frozen one until the first optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import ParamTensor, Tensor
from .backbone import (BackboneConfig, EncoderLayerWeights, encode,
                       init_backbone, scaled_dot_attention)
from .pointops import (EmbeddingMatrix, PointCloud, TokenizedCloud,
                       TokenizerWeights, fan_in_uniform, init_tokenizer, knn,
                       tokenize)


@dataclass
class PromptSet:
    """s trainable prompt tokens, injected between CLS and the patches."""

    prompts: ParamTensor  # (s, D)

    def __post_init__(self):
        if self.prompts.frozen:
            raise ValueError("prompts must be trainable")
        if self.prompts.tensor.values.ndim != 2:
            raise ValueError("prompts must be a (s, D) matrix")

    @property
    def length(self) -> int:
        return int(self.prompts.tensor.shape[0])


@dataclass
class EdgeConvConfig:
    k_graph: int = 20
    dims: tuple = (64, 64, 64, 64)
    ffn_dim: int = 256
    out_dim: int = 256
    # recompute the token KNN graph in each layer's input feature space;
    # False reuses the graph built from the first layer's input
    dynamic_graph: bool = True

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 1 or min(self.dims) < 1:
            raise ValueError(f"need at least one positive layer width, got {self.dims}")
        if self.k_graph < 1 or self.ffn_dim < 1 or self.out_dim < 1:
            raise ValueError("k_graph, ffn_dim and out_dim must be positive")


@dataclass
class GftModelConfig:
    embed_dim: int = 384
    num_layers: int = 12
    num_heads: int = 6
    mlp_ratio: int = 4
    tokenizer_hidden: int = 128
    num_patches: int = 128
    patch_size: int = 32
    prompt_length: int = 50
    edgeconv: EdgeConvConfig = field(default_factory=EdgeConvConfig)
    xattn_dim: int = 32
    xattn_heads: int = 2
    interaction_layers: tuple = (1, 4, 7, 10)
    num_classes: int = 15

    def __post_init__(self):
        self.interaction_layers = tuple(sorted(set(int(i) for i in self.interaction_layers)))
        bad = [i for i in self.interaction_layers if not 1 <= i <= self.num_layers]
        if bad:
            raise ValueError(f"interaction layers {bad} outside [1, {self.num_layers}]")
        if self.xattn_dim % self.xattn_heads != 0:
            raise ValueError(
                f"xattn_heads={self.xattn_heads} must divide xattn_dim={self.xattn_dim}")
        if self.prompt_length < 0:
            raise ValueError("prompt_length must be >= 0")

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.embed_dim, self.num_layers, self.num_heads, self.mlp_ratio)

    @property
    def num_tokens(self) -> int:
        """Token rows seen by the pyramid: prompts + patches, no CLS."""
        return self.prompt_length + self.num_patches


@dataclass
class EdgeConvLayerWeights:
    weight: ParamTensor  # (2 * d_in, d_out)
    bias: ParamTensor    # (d_out,)


@dataclass
class EdgeConvPyramidWeights:
    layers: list[EdgeConvLayerWeights]
    ffn1_weight: ParamTensor
    ffn1_bias: ParamTensor
    ffn2_weight: ParamTensor
    ffn2_bias: ParamTensor

    def parameters(self) -> list[ParamTensor]:
        out = []
        for lw in self.layers:
            out += [lw.weight, lw.bias]
        return out + [self.ffn1_weight, self.ffn1_bias, self.ffn2_weight, self.ffn2_bias]


@dataclass
class PyramidFeatures:
    """Per-layer EdgeConv outputs plus the fused projection M."""

    per_layer: list[Tensor]  # each (s+L, d_k)
    fused: Tensor            # (s+L, out_dim)

    @property
    def num_rows(self) -> int:
        return int(self.fused.shape[0])


@dataclass
class InteractionBlock:
    """Zero-initialized cross-attention from the embedding stream (queries)
    into the fused graph features (keys/values). h_x must divide d_x and
    the output projection starts at exactly zero, making the block an
    identity map until trained."""

    norm_e_gain: ParamTensor
    norm_e_bias: ParamTensor
    norm_m_gain: ParamTensor
    norm_m_bias: ParamTensor
    q_weight: ParamTensor
    q_bias: ParamTensor
    k_weight: ParamTensor
    k_bias: ParamTensor
    v_weight: ParamTensor
    v_bias: ParamTensor
    out_weight: ParamTensor
    out_bias: ParamTensor
    num_heads: int

    def __post_init__(self):
        d_x = self.q_weight.tensor.shape[1]
        if d_x % self.num_heads != 0:
            raise ValueError(f"heads {self.num_heads} must divide width {d_x}")

    def parameters(self) -> list[ParamTensor]:
        return [self.norm_e_gain, self.norm_e_bias, self.norm_m_gain, self.norm_m_bias,
                self.q_weight, self.q_bias, self.k_weight, self.k_bias,
                self.v_weight, self.v_bias, self.out_weight, self.out_bias]


@dataclass
class GftModel:
    """Frozen encoder plus the trainable sidecar. Task heads live outside;
    they consume the ForwardResult."""

    config: GftModelConfig
    cls_token: ParamTensor
    prompts: PromptSet
    tokenizer: TokenizerWeights
    encoder: list[EncoderLayerWeights]
    final_norm_gain: ParamTensor  # frozen, applied to E_F before pooling
    final_norm_bias: ParamTensor
    pyramid: EdgeConvPyramidWeights
    interactions: dict[int, InteractionBlock]

    def parameters(self) -> list[ParamTensor]:
        out = [self.cls_token, self.prompts.prompts]
        out += self.tokenizer.parameters()
        for lw in self.encoder:
            out += lw.parameters()
        out += [self.final_norm_gain, self.final_norm_bias]
        out += self.pyramid.parameters()
        for i in sorted(self.interactions):
            out += self.interactions[i].parameters()
        return out


def init_pyramid(rng: np.random.Generator, in_dim: int, cfg: EdgeConvConfig,
                 dtype=np.float64) -> EdgeConvPyramidWeights:
    def linear(name, d_in, d_out):
        bound = 1.0 / np.sqrt(d_in)
        return (nc.param(f"{name}.weight", fan_in_uniform(rng, (d_in, d_out), dtype)),
                nc.param(f"{name}.bias", rng.uniform(-bound, bound, d_out).astype(dtype)))

    layers = []
    d_in = in_dim
    for j, d_out in enumerate(cfg.dims, start=1):
        w, b = linear(f"edgeconv.layer{j}", 2 * d_in, d_out)
        layers.append(EdgeConvLayerWeights(weight=w, bias=b))
        d_in = d_out
    f1w, f1b = linear("edgeconv.ffn1", sum(cfg.dims), cfg.ffn_dim)
    f2w, f2b = linear("edgeconv.ffn2", cfg.ffn_dim, cfg.out_dim)
    return EdgeConvPyramidWeights(layers=layers, ffn1_weight=f1w, ffn1_bias=f1b,
                                  ffn2_weight=f2w, ffn2_bias=f2b)


def init_interaction(rng: np.random.Generator, layer: int, embed_dim: int, m_dim: int,
                     d_x: int, h_x: int, std: float = 0.02, dtype=np.float64) -> InteractionBlock:
    pre = f"interaction.layer{layer:02d}"

    def w(name, shape):
        return nc.param(f"{pre}.{name}", rng.normal(0.0, std, shape).astype(dtype))

    def zero(name, shape):
        return nc.param(f"{pre}.{name}", np.zeros(shape, dtype=dtype))

    def one(name, shape):
        return nc.param(f"{pre}.{name}", np.ones(shape, dtype=dtype))

    return InteractionBlock(
        norm_e_gain=one("norm_e.gain", embed_dim), norm_e_bias=zero("norm_e.bias", embed_dim),
        norm_m_gain=one("norm_m.gain", m_dim), norm_m_bias=zero("norm_m.bias", m_dim),
        q_weight=w("q.weight", (embed_dim, d_x)), q_bias=zero("q.bias", d_x),
        k_weight=w("k.weight", (m_dim, d_x)), k_bias=zero("k.bias", d_x),
        v_weight=w("v.weight", (m_dim, d_x)), v_bias=zero("v.bias", d_x),
        # identity at init: the write-back path starts at exactly zero
        out_weight=zero("out.weight", (d_x, embed_dim)), out_bias=zero("out.bias", embed_dim),
        num_heads=h_x,
    )


def init_model(cfg: GftModelConfig, seed: int = 0, std: float = 0.02,
               dtype=np.float64) -> GftModel:
    """Build a model with a seeded random frozen encoder and fresh sidecar.

    Transformer-block weights use normal(0, std); the pointwise MLPs
    (tokenizer, EdgeConv) use fan-in uniform init.
    """
    rng = np.random.default_rng(seed)
    cls_token = nc.param("cls_token", rng.normal(0.0, std, (1, cfg.embed_dim)).astype(dtype))
    prompts = PromptSet(nc.param(
        "prompts", rng.normal(0.0, std, (cfg.prompt_length, cfg.embed_dim)).astype(dtype)))
    tokenizer = init_tokenizer(rng, cfg.tokenizer_hidden, cfg.embed_dim, dtype)
    encoder = init_backbone(rng, cfg.backbone(), std, dtype)
    final_gain = nc.param("encoder.final_norm.gain",
                          np.ones(cfg.embed_dim, dtype=dtype), frozen=True)
    final_bias = nc.param("encoder.final_norm.bias",
                          np.zeros(cfg.embed_dim, dtype=dtype), frozen=True)
    pyramid = init_pyramid(rng, cfg.embed_dim, cfg.edgeconv, dtype)
    interactions = {
        i: init_interaction(rng, i, cfg.embed_dim, cfg.edgeconv.out_dim,
                            cfg.xattn_dim, cfg.xattn_heads, std, dtype)
        for i in cfg.interaction_layers
    }
    return GftModel(cfg, cls_token, prompts, tokenizer, encoder, final_gain, final_bias,
                    pyramid, interactions)


# ---------------------------------------------------------------------------
# forward-pass pieces
# ---------------------------------------------------------------------------


def inject_prompts(e0: EmbeddingMatrix, p: PromptSet) -> EmbeddingMatrix:
    """Insert the prompt rows: [CLS | patches] -> [CLS | prompts | patches]."""
    if e0.num_prompts != 0:
        raise ValueError("prompts already injected")
    s = p.length
    if s == 0:
        return e0
    cls = nc.take_rows(e0.data, np.arange(1))
    patches = nc.take_rows(e0.data, np.arange(1, e0.num_rows))
    data = nc.concat([cls, p.prompts.tensor, patches], axis=0)
    return EmbeddingMatrix(data, num_prompts=s, num_patches=e0.num_patches)


def token_edge_features(tokens: Tensor, k_graph: int, indices: np.ndarray | None = None):
    """Per-token KNN edge features concat(T_i, N_j - T_i), shape (n, k, 2d).

    The graph is built in the tokens' own feature space and excludes the
    self edge; graph structure is treated as data (no gradient flows
    through neighbor selection, only through the gathered features).
    Passing ``indices`` reuses a previously computed graph.
    """
    n, d = tokens.shape
    if indices is None:
        if k_graph > n - 1:
            raise ValueError(f"k_graph={k_graph} needs at least {k_graph + 1} tokens, got {n}")
        indices = knn(tokens.values, tokens.values, k_graph, include_self=False)
    k = indices.shape[1]
    neighbors = nc.take_rows(tokens, indices.reshape(-1))          # (n*k, d)
    center = nc.take_rows(tokens, np.repeat(np.arange(n), k))      # (n*k, d)
    edges = nc.concat([center, nc.sub(neighbors, center)], axis=1)  # (n*k, 2d)
    return nc.reshape(edges, (n, k, 2 * d)), indices


def edgeconv_layer(tokens: Tensor, k_graph: int, weights: EdgeConvLayerWeights,
                   indices: np.ndarray | None = None) -> Tensor:
    """Shared linear over each edge feature, LeakyReLU(0.2), max over k."""
    n = tokens.shape[0]
    edges, _ = token_edge_features(tokens, k_graph, indices)
    k = edges.shape[1]
    flat = nc.reshape(edges, (n * k, edges.shape[2]))
    z = nc.leaky_relu(nc.add_bias(nc.matmul(flat, weights.weight.tensor),
                                  weights.bias.tensor), 0.2)
    d_out = weights.weight.tensor.shape[1]
    return nc.axis_max(nc.reshape(z, (n, k, d_out)), axis=1)


def edgeconv_pyramid(tokens: Tensor, weights: EdgeConvPyramidWeights,
                     cfg: EdgeConvConfig) -> PyramidFeatures:
    """Chain of EdgeConv layers, feature concat, two-layer fusion FFN.

    Layer j > 1 consumes layer j-1's output; with dynamic_graph each layer
    rebuilds its KNN graph in its own input space, otherwise the graph
    from the first input is reused throughout.
    """
    static_idx = None
    if not cfg.dynamic_graph:
        static_idx = knn(tokens.values, tokens.values, cfg.k_graph, include_self=False)
    x = tokens
    outs = []
    for lw in weights.layers:
        x = edgeconv_layer(x, cfg.k_graph, lw, indices=static_idx)
        outs.append(x)
    cat = outs[0] if len(outs) == 1 else nc.concat(outs, axis=1)
    h = nc.gelu(nc.add_bias(nc.matmul(cat, weights.ffn1_weight.tensor),
                            weights.ffn1_bias.tensor))
    fused = nc.add_bias(nc.matmul(h, weights.ffn2_weight.tensor), weights.ffn2_bias.tensor)
    return PyramidFeatures(per_layer=outs, fused=fused)


def cross_attention_interaction(e: EmbeddingMatrix, m: PyramidFeatures,
                                blk: InteractionBlock) -> EmbeddingMatrix:
    """E' = E + OutProj(MHA(q=LN(E), k=v=LN(M))). Every row of E queries,
    including CLS; output shape equals input shape."""
    if m.num_rows != e.num_rows - 1:
        raise ValueError(
            f"graph features have {m.num_rows} rows, embedding expects {e.num_rows - 1}")
    en = nc.layer_norm(e.data, blk.norm_e_gain.tensor, blk.norm_e_bias.tensor)
    mn = nc.layer_norm(m.fused, blk.norm_m_gain.tensor, blk.norm_m_bias.tensor)
    q = nc.add_bias(nc.matmul(en, blk.q_weight.tensor), blk.q_bias.tensor)
    k = nc.add_bias(nc.matmul(mn, blk.k_weight.tensor), blk.k_bias.tensor)
    v = nc.add_bias(nc.matmul(mn, blk.v_weight.tensor), blk.v_bias.tensor)
    ctx = scaled_dot_attention(q, k, v, blk.num_heads)
    out = nc.add_bias(nc.matmul(ctx, blk.out_weight.tensor), blk.out_bias.tensor)
    return EmbeddingMatrix(nc.add(e.data, out), e.num_prompts, e.num_patches)


@dataclass
class ForwardResult:
    final: EmbeddingMatrix
    pooled: Tensor                      # (1, 3D): [cls | max patches | max prompts]
    grouped: TokenizedCloud
    pyramid: PyramidFeatures | None
    taps: dict[int, EmbeddingMatrix]
    attention: dict[int, np.ndarray]


def pool_tokens(e: EmbeddingMatrix) -> Tensor:
    """Global feature: concat(CLS, max over patches, max over prompts).

    With no prompts the third slot is zeros so the pooled width stays 3D
    and heads are shape-stable across prompt lengths.
    """
    d = e.dim
    cls = nc.take_rows(e.data, np.arange(1))
    first_patch = 1 + e.num_prompts
    patches = nc.take_rows(e.data, np.arange(first_patch, e.num_rows))
    patch_max = nc.reshape(nc.axis_max(patches, axis=0), (1, d))
    if e.num_prompts > 0:
        prompts = nc.take_rows(e.data, np.arange(1, first_patch))
        prompt_max = nc.reshape(nc.axis_max(prompts, axis=0), (1, d))
    else:
        prompt_max = nc.tensor(np.zeros((1, d), dtype=e.data.values.dtype))
    return nc.concat([cls, patch_max, prompt_max], axis=1)


def gft_forward(cloud: PointCloud, model: GftModel, taps=(), attention_taps=()) -> ForwardResult:
    """tokenize -> inject prompts -> graph pyramid -> encoder with
    interaction hooks -> final norm -> pooled global feature.

    Taps are raw per-layer outputs (the segmentation decoder wants them
    un-normalized); ``final`` carries the normalized last embedding.
    """
    cfg = model.config
    e0, grouped = tokenize(cloud, cfg.num_patches, cfg.patch_size,
                           model.tokenizer, model.cls_token)
    e0 = inject_prompts(e0, model.prompts)
    pyr = None
    hooks = {}
    if model.interactions:
        tokens0 = nc.take_rows(e0.data, np.arange(1, e0.num_rows))
        pyr = edgeconv_pyramid(tokens0, model.pyramid, cfg.edgeconv)

        def make_hook(blk):
            return lambda e: cross_attention_interaction(e, pyr, blk)

        hooks = {i: make_hook(blk) for i, blk in model.interactions.items()}
    last, collected, attention = encode(e0, model.encoder, cfg.num_heads,
                                        hooks=hooks, taps=taps,
                                        attention_taps=attention_taps)
    final = EmbeddingMatrix(
        nc.layer_norm(last.data, model.final_norm_gain.tensor, model.final_norm_bias.tensor),
        last.num_prompts, last.num_patches)
    return ForwardResult(final, pool_tokens(final), grouped, pyr, collected, attention)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------


@dataclass
class ParamLedger:
    entries: list  # (name, count, frozen)
    trainable: int
    total: int

    @property
    def percentage(self) -> float:
        return 100.0 * self.trainable / self.total if self.total else 0.0


def count_trainable_params(params) -> ParamLedger:
    """Deterministic per-tensor ledger. Accepts a parameter list or any
    object with a .parameters() method (model, head, or a combination)."""
    if hasattr(params, "parameters"):
        params = params.parameters()
    entries = [(p.name, p.count, p.frozen) for p in params]
    trainable = sum(c for _, c, f in entries if not f)
    return ParamLedger(entries, trainable, sum(c for _, c, _ in entries))


def _linear_flops(n: int, d_in: int, d_out: int) -> int:
    # 2 FLOPs per multiply-accumulate; bias adds and activations excluded
    return 2 * n * d_in * d_out


def estimate_flops(model: GftModel, n_points: int, head_dims: tuple = ()) -> int:
    """Forward-pass FLOPs under a 2-per-MAC convention.

    Counts matmuls (projections, attention score/value products), pairwise
    KNN/FPS distance work, the tokenizer, the EdgeConv pyramid and the
    interaction blocks. Normalizations, softmax and activations are not
    MACs and are excluded. ``head_dims`` appends a chain of linear layers
    applied to the pooled 3D-wide feature (the classification head).
    """
    cfg = model.config
    d = cfg.embed_dim
    L, kg = cfg.num_patches, cfg.patch_size
    s = cfg.prompt_length
    r = 1 + s + L
    total = 0
    # geometry: FPS maintains one distance row per step, grouping knn is L x N
    total += 2 * L * n_points * 3
    total += 2 * L * n_points * 3
    # tokenizer over L groups of kg points
    h = cfg.tokenizer_hidden
    total += _linear_flops(L * kg, 3, h) + _linear_flops(L * kg, 2 * h, d)
    # EdgeConv pyramid on s+L tokens
    n = s + L
    ec = cfg.edgeconv
    d_in = d
    for d_out in ec.dims:
        total += 2 * n * n * d_in            # pairwise distances in feature space
        total += _linear_flops(n * ec.k_graph, 2 * d_in, d_out)
        d_in = d_out
    total += _linear_flops(n, sum(ec.dims), ec.ffn_dim)
    total += _linear_flops(n, ec.ffn_dim, ec.out_dim)
    # encoder: per layer 4 projections + QK^T + PV
    per_layer = 4 * _linear_flops(r, d, d) + 2 * (2 * r * r * d)
    per_layer += _linear_flops(r, d, cfg.mlp_ratio * d) + _linear_flops(r, cfg.mlp_ratio * d, d)
    total += cfg.num_layers * per_layer
    # interaction blocks: q from r rows, k/v from n rows, attention r x n
    dx, dm = cfg.xattn_dim, ec.out_dim
    per_blk = (_linear_flops(r, d, dx) + 2 * _linear_flops(n, dm, dx)
               + 2 * (2 * r * n * dx) + _linear_flops(r, dx, d))
    total += len(model.interactions) * per_blk
    # head applied once to the pooled (1, 3d) feature
    w_in = 3 * d
    for w_out in head_dims:
        total += _linear_flops(1, w_in, w_out)
        w_in = w_out
    return total
