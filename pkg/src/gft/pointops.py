"""Geometry-space operations: farthest point sampling, KNN, grouping, and
the point tokenizer that turns a cloud into the initial token sequence
[CLS | patch tokens].

Everything here is deterministic for a fixed input order. FPS always
starts at index 0 and KNN breaks distance ties toward the lower index, so
two runs (or two processes) produce bit-identical groupings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import ParamTensor, Tensor


@dataclass
class PointCloud:
    """Raw N x 3 coordinates with optional labels.

    ``point_labels`` are per-point part ids (segmentation),
    ``object_label`` is the instance class id (classification).
    """

    points: np.ndarray
    point_labels: np.ndarray | None = None
    object_label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise ValueError(f"points must be N x 3 with N >= 1, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise ValueError("points contain non-finite coordinates")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.intp)
            if self.point_labels.shape != (self.points.shape[0],):
                raise ValueError("point_labels must have one entry per point")
            if self.point_labels.min() < 0:
                raise ValueError("point_labels must be non-negative class ids")

    @property
    def num_points(self) -> int:
        return int(self.points.shape[0])


@dataclass
class TokenizedCloud:
    """FPS centers plus their KNN groups, with group coordinates
    re-centered on each center (the center's own entry becomes 0)."""

    center_indices: np.ndarray  # (L,)
    centers: np.ndarray         # (L, 3)
    groups: np.ndarray          # (L, k_group) indices into the cloud
    group_coords: np.ndarray    # (L, k_group, 3) neighbor - center offsets

    @property
    def num_tokens(self) -> int:
        return int(self.centers.shape[0])


@dataclass
class EmbeddingMatrix:
    """The transformer token sequence, rows laid out [CLS | prompts | patches].

    Row and feature counts never change inside the encoder; only the
    prompt count changes (once) at injection time.
    """

    data: Tensor
    num_prompts: int
    num_patches: int

    def __post_init__(self):
        rows = 1 + self.num_prompts + self.num_patches
        if self.data.shape[0] != rows:
            raise ValueError(
                f"embedding has {self.data.shape[0]} rows, layout says {rows} "
                f"(1 cls + {self.num_prompts} prompts + {self.num_patches} patches)"
            )

    @property
    def num_rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])


def fps(points: np.ndarray, m: int) -> np.ndarray:
    """Greedy maximin (farthest point) sampling of ``m`` indices.

    Always starts at index 0 so the selection is reproducible across runs;
    at each step the point maximizing the min-distance to the chosen set is
    taken, first index winning ties. Indices are returned in selection
    order.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"fps: need 1 <= m <= {n}, got m={m}")
    chosen = np.empty(m, dtype=np.intp)
    chosen[0] = 0
    d2 = ((pts - pts[0]) ** 2).sum(axis=1)
    for t in range(1, m):
        nxt = int(np.argmax(d2))
        chosen[t] = nxt
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return chosen


def knn(queries: np.ndarray, points: np.ndarray, k: int, include_self: bool = True) -> np.ndarray:
    """K nearest neighbors under the Euclidean metric.

    Returns a (Q, k) index array sorted by ascending distance, ties broken
    toward the lower index. With ``include_self=False`` queries and points
    must be the same stack (row i is excluded for query i), which is how
    token-space graphs drop the self edge.
    """
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    if q.ndim != 2 or p.ndim != 2 or q.shape[1] != p.shape[1]:
        raise ValueError(f"knn: incompatible shapes {q.shape} vs {p.shape}")
    n = p.shape[0]
    limit = n if include_self else n - 1
    if not 1 <= k <= limit:
        raise ValueError(f"knn: need 1 <= k <= {limit}, got k={k}")
    # direct differences keep exactly-equal distances exactly equal, which
    # the tie rule relies on (the expanded q.p formula would not)
    d2 = ((q[:, None, :] - p[None, :, :]) ** 2).sum(axis=2)
    if not include_self:
        if q.shape[0] != n:
            raise ValueError("knn: include_self=False requires queries == points")
        np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.intp)


def group_points(points: np.ndarray, num_tokens: int, group_size: int) -> TokenizedCloud:
    """FPS centers + KNN groups, with coordinates re-centered per group.

    Re-centering makes the patch features invariant to rigid translation
    of the whole cloud. Degenerate clouds (all points identical) are
    allowed; every group then collapses onto the same point.
    """
    pts = np.asarray(points, dtype=np.float64)
    center_idx = fps(pts, num_tokens)
    centers = pts[center_idx]
    groups = knn(centers, pts, group_size, include_self=True)
    group_coords = pts[groups] - centers[:, None, :]
    return TokenizedCloud(center_idx, centers, groups, group_coords)


@dataclass
class TokenizerWeights:
    """Two-stage shared pointwise MLP. Only the first projection layer is
    trainable; the rest of the tokenizer stays frozen with the backbone."""

    stage1_weight: ParamTensor  # (3, hidden), trainable
    stage1_bias: ParamTensor    # (hidden,), trainable
    stage2_weight: ParamTensor  # (2 * hidden, D), frozen
    stage2_bias: ParamTensor    # (D,), frozen

    def __post_init__(self):
        if self.stage1_weight.frozen or self.stage1_bias.frozen:
            raise ValueError("tokenizer first layer must be trainable")
        if not (self.stage2_weight.frozen and self.stage2_bias.frozen):
            raise ValueError("tokenizer stage-2 layer must be frozen")

    @property
    def hidden(self) -> int:
        return int(self.stage1_weight.tensor.shape[1])

    @property
    def embed_dim(self) -> int:
        return int(self.stage2_weight.tensor.shape[1])

    def parameters(self) -> list[ParamTensor]:
        return [self.stage1_weight, self.stage1_bias, self.stage2_weight, self.stage2_bias]


def fan_in_uniform(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) for a (d_in, d_out)
    weight; the default linear-layer init for the pointwise MLPs here.
    Bias vectors use the same bound as their weight, passed explicitly."""
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, shape).astype(dtype)


def init_tokenizer(rng: np.random.Generator, hidden: int, embed_dim: int,
                   dtype=np.float64) -> TokenizerWeights:
    b1 = 1.0 / np.sqrt(3)
    b2 = 1.0 / np.sqrt(2 * hidden)
    return TokenizerWeights(
        stage1_weight=nc.param("tokenizer.stage1.weight",
                               fan_in_uniform(rng, (3, hidden), dtype)),
        stage1_bias=nc.param("tokenizer.stage1.bias",
                             rng.uniform(-b1, b1, hidden).astype(dtype)),
        stage2_weight=nc.param("tokenizer.stage2.weight",
                               fan_in_uniform(rng, (2 * hidden, embed_dim), dtype),
                               frozen=True),
        stage2_bias=nc.param("tokenizer.stage2.bias",
                             rng.uniform(-b2, b2, embed_dim).astype(dtype),
                             frozen=True),
    )


def embed_groups(tok: TokenizedCloud, weights: TokenizerWeights) -> Tensor:
    """Mini-PointNet over each group: pointwise 3 -> hidden, ReLU, concat
    with the group max, pointwise 2*hidden -> D, max-pool over the group.
    Returns the (L, D) patch token matrix.
    """
    L, k, _ = tok.group_coords.shape
    h = weights.hidden
    coords = nc.tensor(tok.group_coords.reshape(L * k, 3))
    feat = nc.relu(nc.add_bias(nc.matmul(coords, weights.stage1_weight.tensor),
                               weights.stage1_bias.tensor))
    feat3 = nc.reshape(feat, (L, k, h))
    gmax = nc.axis_max(feat3, axis=1)                      # (L, h)
    tiled = nc.take_rows(gmax, np.repeat(np.arange(L), k))  # (L*k, h)
    both = nc.concat([feat, tiled], axis=1)                 # (L*k, 2h)
    z = nc.add_bias(nc.matmul(both, weights.stage2_weight.tensor), weights.stage2_bias.tensor)
    z3 = nc.reshape(z, (L, k, weights.embed_dim))
    return nc.axis_max(z3, axis=1)                          # (L, D)


def tokenize(cloud: PointCloud, num_tokens: int, group_size: int,
             weights: TokenizerWeights, cls_token: ParamTensor) -> tuple[EmbeddingMatrix, TokenizedCloud]:
    """Full tokenizer: FPS + KNN grouping, group embedding, CLS prepend.

    Output layout is [CLS | patches], shape (1 + L) x D. The grouping is
    also returned since task heads and the attention exporter need the
    token centers.
    """
    grouped = group_points(cloud.points, num_tokens, group_size)
    patches = embed_groups(grouped, weights)
    data = nc.concat([cls_token.tensor, patches], axis=0)
    return EmbeddingMatrix(data, num_prompts=0, num_patches=num_tokens), grouped
