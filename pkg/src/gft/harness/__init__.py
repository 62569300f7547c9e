"""Dataset plumbing, training loop, reporting, and the CLI."""

from .data import (CloudFormatError, DatasetManifest, FewShotTask,
                   ManifestEntry, load_cloud, load_manifest, make_instance,
                   sample_few_shot, save_cloud, save_manifest, synth_dataset)
from .reporting import (attention_report, param_report_lines,
                        plot_training_curves, write_metrics_csv)
from .training import (AdamW, EpochRow, TrainConfig, TrainResult,
                       cosine_schedule, evaluate, freeze_sidecar, toy_setup,
                       train)

__all__ = [
    "AdamW", "CloudFormatError", "DatasetManifest", "EpochRow",
    "FewShotTask", "ManifestEntry", "TrainConfig", "TrainResult",
    "attention_report", "cosine_schedule", "evaluate", "freeze_sidecar",
    "load_cloud", "load_manifest", "make_instance", "param_report_lines",
    "plot_training_curves", "sample_few_shot", "save_cloud", "save_manifest",
    "synth_dataset", "toy_setup", "train", "write_metrics_csv",
]
