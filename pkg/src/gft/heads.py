"""Task heads: object classification from pooled token features, and the
per-point part-segmentation decoder, plus the losses and metrics both
training paths report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import ParamTensor, Tensor
from .backbone import attention_block
from .model import ForwardResult, GftModel, gft_forward
from .pointops import PointCloud, fan_in_uniform, knn


@dataclass
class ClassifierHead:
    """MLP 3D -> hidden -> hidden -> C over the pooled feature, dropout 0.5
    after each hidden activation during training only."""

    fc1_weight: ParamTensor
    fc1_bias: ParamTensor
    fc2_weight: ParamTensor
    fc2_bias: ParamTensor
    fc3_weight: ParamTensor
    fc3_bias: ParamTensor
    dropout: float = 0.5

    @property
    def num_classes(self) -> int:
        return int(self.fc3_weight.tensor.shape[1])

    def parameters(self) -> list[ParamTensor]:
        return [self.fc1_weight, self.fc1_bias, self.fc2_weight, self.fc2_bias,
                self.fc3_weight, self.fc3_bias]


def init_classifier(rng: np.random.Generator, embed_dim: int, num_classes: int,
                    hidden: int = 256, dropout: float = 0.5,
                    dtype=np.float64) -> ClassifierHead:
    d_in = 3 * embed_dim

    def linear(name, n_in, n_out):
        bound = 1.0 / np.sqrt(n_in)
        return (nc.param(f"head.{name}.weight", fan_in_uniform(rng, (n_in, n_out), dtype)),
                nc.param(f"head.{name}.bias", rng.uniform(-bound, bound, n_out).astype(dtype)))

    w1, b1 = linear("fc1", d_in, hidden)
    w2, b2 = linear("fc2", hidden, hidden)
    w3, b3 = linear("fc3", hidden, num_classes)
    return ClassifierHead(fc1_weight=w1, fc1_bias=b1, fc2_weight=w2, fc2_bias=b2,
                          fc3_weight=w3, fc3_bias=b3, dropout=dropout)


def classify(pooled: Tensor, head: ClassifierHead, train: bool = False,
             dropout_seed: int = 0) -> Tensor:
    """Logits from the pooled (1, 3D) feature. Evaluation calls are
    deterministic; training applies dropout with the given seed."""
    h = nc.relu(nc.add_bias(nc.matmul(pooled, head.fc1_weight.tensor), head.fc1_bias.tensor))
    if train and head.dropout > 0:
        h = nc.dropout(h, head.dropout, dropout_seed)
    h = nc.relu(nc.add_bias(nc.matmul(h, head.fc2_weight.tensor), head.fc2_bias.tensor))
    if train and head.dropout > 0:
        h = nc.dropout(h, head.dropout, dropout_seed + 1)
    return nc.add_bias(nc.matmul(h, head.fc3_weight.tensor), head.fc3_bias.tensor)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if logits.values.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise nc.ShapeError(f"cross_entropy: logits {logits.shape} vs {labels.shape[0]} labels")
    lp = nc.log_softmax(logits, axis=-1)
    picked = nc.pick_rows(lp, labels)
    return nc.scale(nc.sum_all(picked), -1.0 / labels.shape[0])


def nll_loss(log_probs: Tensor, labels) -> Tensor:
    """Mean over rows of -log_probs[label]; rows must already be
    log-softmax outputs."""
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if log_probs.values.ndim != 2 or log_probs.shape[0] != labels.shape[0]:
        raise nc.ShapeError(f"nll_loss: log_probs {log_probs.shape} vs {labels.shape[0]} labels")
    picked = nc.pick_rows(log_probs, labels)
    return nc.scale(nc.sum_all(picked), -1.0 / labels.shape[0])


@dataclass
class DecoderBlockWeights:
    """Same field layout as an encoder layer so attention_block applies,
    but trainable."""

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

    def parameters(self) -> list[ParamTensor]:
        return [
            self.norm1_gain, self.norm1_bias,
            self.q_weight, self.q_bias, self.k_weight, self.k_bias,
            self.v_weight, self.v_bias, self.out_weight, self.out_bias,
            self.norm2_gain, self.norm2_bias,
            self.mlp1_weight, self.mlp1_bias, self.mlp2_weight, self.mlp2_bias,
        ]


@dataclass
class SegDecoder:
    """Per-point decoder: down-project four encoder taps, fuse, run
    self-attention blocks over the tokens, propagate token features to
    the points by inverse-distance interpolation, and classify each point
    with an MLP that also sees a global max feature."""

    tap_layers: tuple
    down_weights: list        # one (D, d_dec) + bias pair per tap
    fuse_weight: ParamTensor  # (len(taps) * d_dec, d_dec)
    fuse_bias: ParamTensor
    blocks: list[DecoderBlockWeights]
    mlp1_weight: ParamTensor  # (2 * d_dec, hidden)
    mlp1_bias: ParamTensor
    mlp2_weight: ParamTensor
    mlp2_bias: ParamTensor
    out_weight: ParamTensor   # (hidden, C)
    out_bias: ParamTensor
    num_heads: int

    @property
    def num_classes(self) -> int:
        return int(self.out_weight.tensor.shape[1])

    def parameters(self) -> list[ParamTensor]:
        out = []
        for w, b in self.down_weights:
            out += [w, b]
        out += [self.fuse_weight, self.fuse_bias]
        for blk in self.blocks:
            out += blk.parameters()
        out += [self.mlp1_weight, self.mlp1_bias, self.mlp2_weight, self.mlp2_bias,
                self.out_weight, self.out_bias]
        return out


def _init_decoder_block(rng, index, d, mlp_ratio, std, dtype) -> DecoderBlockWeights:
    m = mlp_ratio * d
    pre = f"seghead.block{index}"

    def w(name, shape):
        return nc.param(f"{pre}.{name}", rng.normal(0.0, std, shape).astype(dtype))

    def zero(name, shape):
        return nc.param(f"{pre}.{name}", np.zeros(shape, dtype=dtype))

    def one(name, shape):
        return nc.param(f"{pre}.{name}", np.ones(shape, dtype=dtype))

    return DecoderBlockWeights(
        norm1_gain=one("norm1.gain", d), norm1_bias=zero("norm1.bias", d),
        q_weight=w("attn.q.weight", (d, d)), q_bias=zero("attn.q.bias", d),
        k_weight=w("attn.k.weight", (d, d)), k_bias=zero("attn.k.bias", d),
        v_weight=w("attn.v.weight", (d, d)), v_bias=zero("attn.v.bias", d),
        out_weight=w("attn.out.weight", (d, d)), out_bias=zero("attn.out.bias", d),
        norm2_gain=one("norm2.gain", d), norm2_bias=zero("norm2.bias", d),
        mlp1_weight=w("mlp.fc1.weight", (d, m)), mlp1_bias=zero("mlp.fc1.bias", m),
        mlp2_weight=w("mlp.fc2.weight", (m, d)), mlp2_bias=zero("mlp.fc2.bias", d),
    )


def init_seg_decoder(rng: np.random.Generator, embed_dim: int, num_classes: int,
                     d_dec: int = 384, num_blocks: int = 2, num_heads: int = 6,
                     mlp_ratio: int = 2, tap_layers: tuple = (3, 6, 9, 11),
                     hidden: int = 256, std: float = 0.02, dtype=np.float64) -> SegDecoder:
    def linear(name, n_in, n_out):
        bound = 1.0 / np.sqrt(n_in)
        return (nc.param(f"seghead.{name}.weight", fan_in_uniform(rng, (n_in, n_out), dtype)),
                nc.param(f"seghead.{name}.bias",
                         rng.uniform(-bound, bound, n_out).astype(dtype)))

    down = [linear(f"down{i}", embed_dim, d_dec)
            for i in range(1, len(tap_layers) + 1)]
    fw, fb = linear("fuse", len(tap_layers) * d_dec, d_dec)
    m1w, m1b = linear("mlp1", 2 * d_dec, hidden)
    m2w, m2b = linear("mlp2", hidden, hidden)
    ow, ob = linear("out", hidden, num_classes)
    return SegDecoder(
        tap_layers=tuple(tap_layers),
        down_weights=down,
        fuse_weight=fw, fuse_bias=fb,
        blocks=[_init_decoder_block(rng, j + 1, d_dec, mlp_ratio, std, dtype)
                for j in range(num_blocks)],
        mlp1_weight=m1w, mlp1_bias=m1b,
        mlp2_weight=m2w, mlp2_bias=m2b,
        out_weight=ow, out_bias=ob,
        num_heads=num_heads,
    )


def propagation_weights(points: np.ndarray, centers: np.ndarray,
                        k: int = 3, eps: float = 1e-8) -> np.ndarray:
    """Dense (N, L) row-stochastic interpolation matrix: inverse-distance
    weights over each point's k nearest token centers. A point sitting
    exactly on a center takes that center's feature with weight 1."""
    n, ell = points.shape[0], centers.shape[0]
    k = min(k, ell)
    idx = knn(points, centers, k)
    dist = np.sqrt(((points[:, None, :] - centers[idx]) ** 2).sum(axis=2))
    w = 1.0 / (dist + eps)
    exact = dist[:, 0] == 0.0
    w[exact] = 0.0
    w[exact, 0] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((n, ell), dtype=points.dtype)
    np.put_along_axis(mat, idx, w, axis=1)
    return mat


def segment(cloud: PointCloud, model: GftModel, decoder: SegDecoder,
            forward: ForwardResult | None = None) -> Tensor:
    """Per-point log-probabilities, shape (N, C).

    Pass ``forward`` to reuse a gft_forward result that already collected
    the decoder's tap layers (the training loop does this).
    """
    if forward is None:
        forward = gft_forward(cloud, model, taps=decoder.tap_layers)
    missing = [i for i in decoder.tap_layers if i not in forward.taps]
    if missing:
        raise ValueError(f"forward result lacks tap layers {missing}")
    downs = []
    for (w, b), layer in zip(decoder.down_weights, decoder.tap_layers):
        e = forward.taps[layer]
        downs.append(nc.add_bias(nc.matmul(e.data, w.tensor), b.tensor))
    x = nc.add_bias(nc.matmul(nc.concat(downs, axis=1), decoder.fuse_weight.tensor),
                    decoder.fuse_bias.tensor)
    for blk in decoder.blocks:
        x = attention_block(x, blk, decoder.num_heads)

    e_last = forward.taps[decoder.tap_layers[-1]]
    first_patch = 1 + e_last.num_prompts
    patch_feats = nc.take_rows(x, np.arange(first_patch, e_last.num_rows))
    d_dec = x.shape[1]

    pts = cloud.points
    n = pts.shape[0]
    prop = nc.matmul(nc.tensor(propagation_weights(pts, forward.grouped.centers)), patch_feats)
    glob = nc.take_rows(nc.reshape(nc.axis_max(x, axis=0), (1, d_dec)), np.zeros(n, dtype=np.intp))
    feat = nc.concat([prop, glob], axis=1)

    h = nc.relu(nc.add_bias(nc.matmul(feat, decoder.mlp1_weight.tensor), decoder.mlp1_bias.tensor))
    h = nc.relu(nc.add_bias(nc.matmul(h, decoder.mlp2_weight.tensor), decoder.mlp2_bias.tensor))
    logits = nc.add_bias(nc.matmul(h, decoder.out_weight.tensor), decoder.out_bias.tensor)
    return nc.log_softmax(logits, axis=-1)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    overall_accuracy: float
    class_miou: float  # nan for classification
    instance_miou: float  # nan for classification


def _shape_miou(pred: np.ndarray, label: np.ndarray, parts) -> float:
    ious = []
    for part in parts:
        p = pred == part
        t = label == part
        union = np.logical_or(p, t).sum()
        if union == 0:
            # part absent from both prediction and truth counts as perfect
            ious.append(1.0)
        else:
            ious.append(np.logical_and(p, t).sum() / union)
    return float(np.mean(ious))


def compute_metrics(predictions, labels, task: str, categories=None,
                    category_parts=None) -> Metrics:
    """OA for classification; OA plus class/instance mIoU for segmentation.

    Segmentation inputs are per-shape label arrays. ``categories`` gives
    each shape's object category and ``category_parts`` the part ids
    belonging to each category; left unset, all shapes share one category
    whose parts are those observed in the ground truth. Per-shape IoU
    averages over that shape's category parts with the union-zero-is-1
    convention.
    """
    if task == "classification":
        pred = np.asarray(predictions, dtype=np.intp).reshape(-1)
        lab = np.asarray(labels, dtype=np.intp).reshape(-1)
        if pred.size == 0 or pred.shape != lab.shape:
            raise ValueError(f"bad metric inputs: {pred.shape} vs {lab.shape}")
        return Metrics(float((pred == lab).mean()), float("nan"), float("nan"))
    if task != "segmentation":
        raise ValueError(f"unknown task {task!r}")

    preds = [np.asarray(p, dtype=np.intp) for p in predictions]
    labs = [np.asarray(l, dtype=np.intp) for l in labels]
    if len(preds) == 0 or len(preds) != len(labs):
        raise ValueError("need one prediction array per labeled shape")
    if categories is None:
        categories = [0] * len(preds)
    categories = list(categories)
    if category_parts is None:
        all_parts = sorted(set(np.concatenate(labs).tolist()))
        category_parts = {c: all_parts for c in set(categories)}

    correct = sum(int((p == l).sum()) for p, l in zip(preds, labs))
    total = sum(len(l) for l in labs)
    by_cat: dict = {}
    shape_ious = []
    for p, l, c in zip(preds, labs, categories):
        if p.shape != l.shape:
            raise ValueError(f"prediction/label length mismatch: {p.shape} vs {l.shape}")
        iou = _shape_miou(p, l, category_parts[c])
        shape_ious.append(iou)
        by_cat.setdefault(c, []).append(iou)
    instance = float(np.mean(shape_ious))
    cls = float(np.mean([np.mean(v) for v in by_cat.values()]))
    return Metrics(correct / total, cls, instance)
