"""Graph feature tuning for frozen point-cloud transformers.

A small numpy library: minimal reverse-mode autodiff (``numcore``), point
sampling and tokenization (``pointops``), a frozen transformer encoder
(``backbone``), the tuning modules and their composed forward pass
(``model``), task heads (``heads``), and a training/data/CLI harness
(``harness``).
"""

from .backbone import (BackboneConfig, CheckpointError, load_checkpoint,
                       save_checkpoint)
from .heads import (ClassifierHead, Metrics, SegDecoder, classify,
                    compute_metrics, cross_entropy, init_classifier,
                    init_seg_decoder, segment)
from .model import (EdgeConvConfig, ForwardResult, GftModel, GftModelConfig,
                    count_trainable_params, estimate_flops, gft_forward,
                    init_model)
from .pointops import PointCloud, TokenizedCloud, fps, knn, tokenize

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "CheckpointError", "ClassifierHead", "EdgeConvConfig",
    "ForwardResult", "GftModel", "GftModelConfig", "Metrics", "PointCloud",
    "SegDecoder", "TokenizedCloud", "classify", "compute_metrics",
    "count_trainable_params", "cross_entropy", "estimate_flops", "fps",
    "gft_forward", "init_classifier", "init_model", "init_seg_decoder",
    "knn", "load_checkpoint", "save_checkpoint", "segment", "tokenize",
    "__version__",
]
