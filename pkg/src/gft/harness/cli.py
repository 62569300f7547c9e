"""Command-line harness.

Subcommands: synth, train, eval, few-shot, count-params, estimate-flops,
export-attention. Model and schedule settings resolve in three layers:
built-in defaults (or the toy preset), then a key=value config file, then
explicit flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from ..backbone import load_checkpoint
from ..heads import init_classifier, init_seg_decoder
from ..model import (EdgeConvConfig, GftModelConfig, count_trainable_params,
                     estimate_flops, init_model)
from .data import load_cloud, load_manifest, sample_few_shot, synth_dataset
from .reporting import (attention_report, param_report_lines,
                        plot_training_curves, write_metrics_csv)
from .training import (TrainConfig, evaluate, freeze_sidecar, toy_setup,
                       train)

# config-file keys, with the value parser for each
_INT = int
_FLOAT = float


def _int_tuple(text):
    text = str(text).strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.replace(",", " ").split())


_SETTING_TYPES = {
    "learning_rate": _FLOAT,
    "warmup_lr": _FLOAT,
    "min_lr": _FLOAT,
    "warmup_epochs": _INT,
    "epochs": _INT,
    "batch_size": _INT,
    "weight_decay": _FLOAT,
    "prompt_length": _INT,
    "edgeconv_knn": _INT,
    "edgeconv_dims": _int_tuple,
    "ffn_dim": _INT,
    "edgeconv_out_dim": _INT,
    "xattn_dim": _INT,
    "xattn_heads": _INT,
    "interaction_layers": _int_tuple,
    "num_patches": _INT,
    "patch_size": _INT,
    "num_points": _INT,
    "embed_dim": _INT,
    "num_layers": _INT,
    "num_heads": _INT,
    "mlp_ratio": _INT,
    "tokenizer_hidden": _INT,
    "head_hidden": _INT,
    "head_dropout": _FLOAT,
}


def parse_config_file(path) -> dict:
    """key=value lines; blank lines and '#' comments ignored."""
    settings = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _SETTING_TYPES:
            raise ValueError(f"{path}:{lineno}: unknown setting {key!r}")
        settings[key] = _SETTING_TYPES[key](value)
    return settings


def _baseline(preset: str, num_classes: int):
    """(model config, train config, head kwargs) before overrides."""
    if preset == "toy":
        return toy_setup(num_classes)
    model_cfg = GftModelConfig(num_classes=num_classes)
    return model_cfg, TrainConfig(), {"hidden": 256, "dropout": 0.5}


def resolve_settings(args, num_classes: int):
    """Layer the config file and CLI flags over the preset baseline."""
    model_cfg, train_cfg, head_kwargs = _baseline(
        getattr(args, "preset", "full"), num_classes)
    settings = {}
    if getattr(args, "config", None):
        settings.update(parse_config_file(args.config))
    for key in _SETTING_TYPES:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = _SETTING_TYPES[key](flag)

    model_fields = {
        "prompt_length", "xattn_dim", "xattn_heads", "interaction_layers",
        "num_patches", "patch_size", "embed_dim", "num_layers", "num_heads",
        "mlp_ratio", "tokenizer_hidden",
    }
    edge_fields = {"edgeconv_knn": "k_graph", "edgeconv_dims": "dims",
                   "ffn_dim": "ffn_dim", "edgeconv_out_dim": "out_dim"}
    train_fields = {"learning_rate": "lr", "warmup_lr": "warmup_lr",
                    "min_lr": "min_lr", "warmup_epochs": "warmup_epochs",
                    "epochs": "epochs", "batch_size": "batch_size",
                    "weight_decay": "weight_decay"}

    model_kv = dict(model_cfg.__dict__)
    edge_kv = dict(model_cfg.edgeconv.__dict__)
    train_kv = dict(train_cfg.__dict__)
    for key, value in settings.items():
        if key in model_fields:
            model_kv[key] = value
        elif key in edge_fields:
            edge_kv[edge_fields[key]] = value
        elif key in train_fields:
            train_kv[train_fields[key]] = value
        elif key == "head_hidden":
            head_kwargs["hidden"] = value
        elif key == "head_dropout":
            head_kwargs["dropout"] = value
        # num_points is consumed by the synth command directly
    model_kv["edgeconv"] = EdgeConvConfig(**edge_kv)
    return GftModelConfig(**model_kv), TrainConfig(**train_kv), head_kwargs


def _build(args, task: str, num_classes: int, seed: int):
    """Model + head + train config from resolved settings."""
    model_cfg, train_cfg, head_kwargs = resolve_settings(args, num_classes)
    train_cfg = TrainConfig(**{**train_cfg.__dict__, "task": task,
                               "seed": seed})
    model = init_model(model_cfg, seed=seed)
    rng = np.random.default_rng([seed, 0x4EAD])
    if task == "classification":
        head = init_classifier(rng, model_cfg.embed_dim, num_classes,
                               **head_kwargs)
    else:
        head = _seg_head(rng, model_cfg, num_classes)
    return model, head, train_cfg


def _seg_head(rng, model_cfg: GftModelConfig, num_classes: int):
    """Segmentation decoder sized to the backbone depth."""
    f = model_cfg.num_layers
    if f >= 12:
        taps = (3, 6, 9, 11)
    else:
        taps = tuple(sorted(set(max(1, round(f * i / 4)) for i in range(1, 5))))
    return init_seg_decoder(
        rng, model_cfg.embed_dim, num_classes,
        d_dec=model_cfg.embed_dim, num_heads=model_cfg.num_heads,
        tap_layers=taps)


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=("full", "toy"), default="full",
                   help="baseline settings before config/flag overrides")
    p.add_argument("--config", help="key=value settings file")
    for key in _SETTING_TYPES:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)


def _add_seed(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)


def _manifest_classes(manifest) -> int:
    if manifest.task == "classification":
        return manifest.num_classes
    labels = set()
    for entry in manifest.entries:
        labels.update(np.unique(manifest.load(entry).point_labels).tolist())
    return len(labels)


def cmd_synth(args):
    kwargs = {}
    if args.config:
        cfg = parse_config_file(args.config)
        if "num_points" in cfg:
            kwargs["n_points"] = cfg["num_points"]
    if args.num_points is not None:
        kwargs["n_points"] = int(args.num_points)
    manifest = synth_dataset(args.kind, args.out, args.n_train, args.n_test,
                             noise_sigma=args.noise_sigma, seed=args.seed,
                             rotation=args.rotation, **kwargs)
    print(f"wrote {len(manifest.entries)} clouds under {args.out}")
    return 0


def cmd_train(args):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    manifest = load_manifest(args.data)
    task = manifest.task
    model, head, train_cfg = _build(args, task, _manifest_classes(manifest),
                                    args.seed)
    result = train(model, head, manifest, train_cfg, out_dir=args.out)
    out = Path(args.out)
    write_metrics_csv(result.rows, out / "metrics.csv")
    plot_training_curves(result.rows, out / "curves.png")
    print(f"best eval metric {result.best_metric:.4f} at epoch "
          f"{result.best_epoch}")
    print(f"wrote {out / 'metrics.csv'}, {out / 'curves.png'}, "
          f"{result.checkpoint_path}")
    return 0


def cmd_eval(args):
    manifest = load_manifest(args.data)
    task = manifest.task
    model, head, _ = _build(args, task, _manifest_classes(manifest),
                            args.seed)
    load_checkpoint(args.checkpoint, model.parameters() + head.parameters())
    metrics, loss = evaluate(model, head, manifest, split=args.split)
    print(f"split={args.split} n={len(manifest.split(args.split))} "
          f"loss {loss:.4f}")
    print(f"overall_accuracy {metrics.overall_accuracy:.4f}")
    if task == "segmentation":
        print(f"instance_miou {metrics.instance_miou:.4f}")
        print(f"class_miou {metrics.class_miou:.4f}")
    return 0


def cmd_few_shot(args):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    manifest = load_manifest(args.data)
    scores = []
    for episode in range(args.episodes):
        task = sample_few_shot(manifest, args.n_way, args.k_shot,
                               seed=args.seed + episode)
        model, head, train_cfg = _build(args, "classification", args.n_way,
                                        args.seed + episode)
        result = train(model, head, manifest, train_cfg,
                       train_entries=task.train_entries,
                       test_entries=task.test_entries,
                       label_map=task.label_map)
        scores.append(result.best_metric)
        print(f"episode {episode}: classes {task.class_ids} "
              f"best OA {result.best_metric:.4f}")
    arr = np.array(scores)
    print(f"{args.n_way}-way {args.k_shot}-shot over {args.episodes} "
          f"episodes: OA {arr.mean():.4f} +/- {arr.std():.4f}")
    return 0


def cmd_count_params(args):
    model, head, _ = _build(args, args.task, args.num_classes, args.seed)
    ledger = count_trainable_params(model.parameters() + head.parameters())
    for line in param_report_lines(ledger, detail=True):
        print(line)
    return 0


def cmd_estimate_flops(args):
    model, head, _ = _build(args, args.task, args.num_classes, args.seed)
    if args.task == "classification":
        dims = tuple(w.tensor.values.shape[1] for w in
                     (head.fc1_weight, head.fc2_weight, head.fc3_weight))
    else:
        dims = ()
    n = 1024
    if args.config:
        n = parse_config_file(args.config).get("num_points", n)
    if args.num_points is not None:
        n = int(args.num_points)
    flops = estimate_flops(model, n, head_dims=dims)
    print(f"estimated forward FLOPs at n={n}: {flops} ({flops / 1e9:.2f} G)")
    return 0


def cmd_export_attention(args):
    cloud = load_cloud(args.cloud)
    model, head, _ = _build(args, args.task, args.num_classes, args.seed)
    if args.checkpoint:
        load_checkpoint(args.checkpoint,
                        model.parameters() + head.parameters())
    layer = args.layer if args.layer is not None else model.config.num_layers
    out_csv = attention_report(cloud, model, layer, args.out_csv,
                               out_png=args.out_png,
                               direction=args.direction)
    print(f"wrote {out_csv}" + (f" and {args.out_png}" if args.out_png else ""))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gft",
        description="Graph-feature tuning for point-cloud transformers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--kind", choices=("classification4", "parts3"),
                   required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--num-points", dest="num_points", default=None)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--rotation", choices=("z", "so3"), default="z")
    p.add_argument("--config", default=None)
    _add_seed(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a manifest dataset")
    p.add_argument("--data", required=True, help="manifest csv path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frozen-baseline", action="store_true",
                   help="disable all tuning modules (linear-probe control)")
    _add_model_flags(p)
    _add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    _add_model_flags(p)
    _add_seed(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("few-shot", help="episodic low-data training")
    p.add_argument("--data", required=True)
    p.add_argument("--n-way", type=int, required=True)
    p.add_argument("--k-shot", type=int, required=True)
    p.add_argument("--episodes", type=int, default=1)
    _add_model_flags(p)
    _add_seed(p)
    p.set_defaults(func=cmd_few_shot)

    p = sub.add_parser("count-params", help="print the parameter ledger")
    p.add_argument("--task", choices=("classification", "segmentation"),
                   default="classification")
    p.add_argument("--num-classes", type=int, default=15)
    _add_model_flags(p)
    _add_seed(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("estimate-flops", help="forward FLOPs estimate")
    p.add_argument("--task", choices=("classification", "segmentation"),
                   default="classification")
    p.add_argument("--num-classes", type=int, default=15)
    _add_model_flags(p)
    _add_seed(p)
    p.set_defaults(func=cmd_estimate_flops)

    p = sub.add_parser("export-attention",
                       help="per-patch attention weights as CSV (+PNG)")
    p.add_argument("--cloud", required=True, help="xyzl cloud file")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-png", default=None)
    p.add_argument("--layer", type=int, default=None,
                   help="1-based encoder layer (default: last)")
    p.add_argument("--direction", choices=("cls_to_patch", "patch_to_cls"),
                   default="cls_to_patch")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--task", choices=("classification", "segmentation"),
                   default="classification")
    p.add_argument("--num-classes", type=int, default=15)
    _add_model_flags(p)
    _add_seed(p)
    p.set_defaults(func=cmd_export_attention)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "frozen_baseline", False):
        return _run_frozen_baseline(args)
    return args.func(args)


def _run_frozen_baseline(args):
    """Linear-probe control: no prompts, no interactions, frozen tokenizer."""
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    manifest = load_manifest(args.data)
    task = manifest.task
    num_classes = _manifest_classes(manifest)
    model_cfg, train_cfg, head_kwargs = resolve_settings(args, num_classes)
    model_cfg = GftModelConfig(**{**model_cfg.__dict__, "prompt_length": 0,
                                  "interaction_layers": ()})
    train_cfg = TrainConfig(**{**train_cfg.__dict__, "task": task,
                               "seed": args.seed})
    model = freeze_sidecar(init_model(model_cfg, seed=args.seed))
    rng = np.random.default_rng([args.seed, 0x4EAD])
    if task == "classification":
        head = init_classifier(rng, model_cfg.embed_dim, num_classes,
                               **head_kwargs)
    else:
        head = _seg_head(rng, model_cfg, num_classes)
    result = train(model, head, manifest, train_cfg, out_dir=args.out)
    out = Path(args.out)
    write_metrics_csv(result.rows, out / "metrics.csv")
    plot_training_curves(result.rows, out / "curves.png")
    print(f"frozen-baseline best eval metric {result.best_metric:.4f} "
          f"at epoch {result.best_epoch}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
