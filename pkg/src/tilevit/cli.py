"""Command-line front end.

Subcommands:
  tile     cut slide images into filtered tiles plus a manifest
  train    fit a model on a directory of class-labeled images
  eval     score a saved checkpoint on a labeled directory
  predict  classify one image with a saved checkpoint

Exit codes: 0 success, 1 usage or configuration problem, 2 bad input data,
3 numeric failure (NaN/Inf) during computation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import ConfigError, ContractError, DataError, NumericError
from .metrics import mean_report, report, write_confusion_csv, write_metrics_json, write_roc_csv
from .preprocess import (
    extract_tile,
    load_rgb_image,
    prepare_input,
    save_rgb_png,
    tile_slide,
    write_manifest,
)
from .train import (
    LabeledDataset,
    TrainConfig,
    load_checkpoint,
    make_holdout_plan,
    run_kfold,
    save_checkpoint,
    split,
    train,
    write_train_log,
)
from .vit import Model, ViTConfig, init_params

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# every settable key, its parser, and which config object it feeds
CONFIG_KEYS = {
    "image_size": (int, "model"),
    "patch_size": (int, "model"),
    "embed_dim": (int, "model"),
    "depth": (int, "model"),
    "heads": (int, "model"),
    "mlp_ratio": (float, "model"),
    "norm_placement": (str, "model"),
    "layer_norm_eps": (float, "model"),
    "lr": (float, "train"),
    "batch_size": (int, "train"),
    "max_epochs": (int, "train"),
    "patience": (int, "train"),
    "beta1": (float, "train"),
    "beta2": (float, "train"),
    "eps_adam": (float, "train"),
    "seed": (int, "train"),
    "freeze_backbone": (_parse_bool, "train"),
    "weight_decay": (float, "train"),
    "grad_clip": (float, "train"),
    "train_fraction": (float, "run"),
    "folds": (int, "run"),
    "split_seed": (int, "run"),
    "val_fraction": (float, "run"),
}

RUN_DEFAULTS = {"train_fraction": 0.8, "folds": 0, "split_seed": 0, "val_fraction": 0.0}


def read_config_file(path: str) -> dict:
    """Flat key=value file; blank lines and # comments ignored."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, text = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            parse, _ = CONFIG_KEYS[key]
            try:
                values[key] = parse(text)
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    return values


def resolve_configs(num_classes: int, file_values: dict, overrides: dict):
    """Merge defaults <- config file <- command-line overrides."""
    merged = dict(file_values)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    model_kwargs = {k: v for k, v in merged.items() if CONFIG_KEYS[k][1] == "model"}
    train_kwargs = {k: v for k, v in merged.items() if CONFIG_KEYS[k][1] == "train"}
    run_values = dict(RUN_DEFAULTS)
    run_values.update({k: v for k, v in merged.items() if CONFIG_KEYS[k][1] == "run"})
    model_cfg = ViTConfig(num_classes=num_classes, **model_kwargs)
    train_cfg = TrainConfig(**train_kwargs)
    if not 0.0 < run_values["train_fraction"] < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {run_values['train_fraction']}")
    if run_values["folds"] < 0 or run_values["folds"] == 1:
        raise ConfigError(f"folds must be 0 (holdout) or >= 2, got {run_values['folds']}")
    if not 0.0 <= run_values["val_fraction"] < 1.0:
        raise ConfigError(f"val_fraction must be in [0, 1), got {run_values['val_fraction']}")
    if run_values["val_fraction"] > 0.0 and run_values["folds"] >= 2:
        raise ConfigError("val_fraction applies to holdout runs, not cross-validation")
    return model_cfg, train_cfg, run_values


def write_run_config(
    path: str, model_cfg: ViTConfig, train_cfg: TrainConfig, run_values: dict, paths: dict
) -> None:
    """Persist every resolved setting, one key=value per line, sorted.

    ``paths`` carries the dataset root and output directory so the file is
    enough to re-run the command.
    """
    entries = dict(paths)
    for key, value in {**model_cfg.to_dict(), **train_cfg.to_dict(), **run_values}.items():
        entries[key] = repr(value) if isinstance(value, float) else str(value)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(entries):
            fh.write(f"{key}={entries[key]}\n")


def list_image_files(directory: str) -> list[str]:
    names = [
        name
        for name in sorted(os.listdir(directory))
        if os.path.splitext(name)[1].lower() in IMAGE_EXTENSIONS
    ]
    return [os.path.join(directory, name) for name in names]


def load_image_dataset(directory: str, image_size: int) -> LabeledDataset:
    """Build a dataset from class subdirectories of ``directory``.

    Class indices follow lexicographic subdirectory order. Files inside each
    class load in sorted name order.
    """
    if not os.path.isdir(directory):
        raise ConfigError(f"dataset directory not found: {directory}")
    class_names = sorted(
        name
        for name in os.listdir(directory)
        if os.path.isdir(os.path.join(directory, name)) and not name.startswith(".")
    )
    if not class_names:
        raise ContractError(f"no class subdirectories in {directory}")
    items = []
    for label, name in enumerate(class_names):
        files = list_image_files(os.path.join(directory, name))
        if not files:
            raise ConfigError(f"class directory {name!r} has no images")
        for path in files:
            items.append((prepare_input(load_rgb_image(path), image_size), label))
    return LabeledDataset(items, class_names)


# ---------------------------------------------------------------------------
# subcommands


def cmd_tile(args) -> int:
    if not os.path.isdir(args.input):
        raise ConfigError(f"input directory not found: {args.input}")
    os.makedirs(args.out, exist_ok=True)
    tiles_dir = os.path.join(args.out, "tiles")
    os.makedirs(tiles_dir, exist_ok=True)
    slide_paths = list_image_files(args.input)
    all_records = []
    failures = 0
    for path in slide_paths:
        slide_id = os.path.splitext(os.path.basename(path))[0]
        try:
            image = load_rgb_image(path)
            records = tile_slide(
                image,
                slide_id,
                tile_size=args.tile_size,
                stride=args.stride,
                bg_threshold=args.bg_threshold,
                min_tissue=args.min_tissue,
            )
        except (DataError, ContractError) as e:
            print(f"error: {path}: {e}", file=sys.stderr)
            failures += 1
            continue
        for record in records:
            if record.accepted:
                tile = extract_tile(image, record)
                name = f"{record.slide_id}_x{record.x}_y{record.y}.png"
                save_rgb_png(os.path.join(tiles_dir, name), tile)
        all_records.extend(records)
        accepted = sum(r.accepted for r in records)
        print(f"{slide_id}: {len(records)} tiles, {accepted} accepted")
    write_manifest(
        os.path.join(args.out, "manifest.csv"),
        all_records,
        bg_threshold=args.bg_threshold,
        min_tissue=args.min_tissue,
        stride=args.stride,
    )
    return EXIT_DATA if failures else EXIT_OK


def _train_artifacts(directory, result, rep, model_cfg, train_cfg, class_names, split_seed):
    os.makedirs(directory, exist_ok=True)
    save_checkpoint(
        directory,
        result.params,
        model_cfg,
        train_cfg,
        epoch=result.best_epoch,
        eval_acc=result.best_eval_acc,
        class_names=class_names,
        split_seed=split_seed,
    )
    write_train_log(os.path.join(directory, "train_log.jsonl"), result.records)
    write_metrics_json(os.path.join(directory, "metrics.json"), rep)
    write_confusion_csv(os.path.join(directory, "confusion.csv"), rep)
    write_roc_csv(os.path.join(directory, "roc.csv"), rep)


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {key: getattr(args, key.replace("-", "_"), None) for key in CONFIG_KEYS}
    probe_size = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}.get(
        "image_size", ViTConfig.__dataclass_fields__["image_size"].default
    )
    ds = load_image_dataset(args.data, probe_size)
    model_cfg, train_cfg, run_values = resolve_configs(ds.num_classes, file_values, overrides)
    os.makedirs(args.out, exist_ok=True)
    write_run_config(
        os.path.join(args.out, "run_config.txt"),
        model_cfg,
        train_cfg,
        run_values,
        {"data": args.data, "out": args.out},
    )

    init = None
    if args.init_from:
        donor, _, _ = load_checkpoint(args.init_from)
        if donor.cfg.to_dict() != {**model_cfg.to_dict(), "num_classes": donor.cfg.num_classes}:
            raise ConfigError("init checkpoint geometry does not match the requested model")
        fresh = init_params(model_cfg, seed=train_cfg.seed)
        carried = {
            name: tensor
            for name, tensor in donor.params.items()
            if name not in ("head_weight", "head_bias")
        }
        init = fresh.with_updates(carried)

    def show(record):
        print(
            f"epoch {record.epoch}: train_loss={record.train_loss:.4f} "
            f"train_acc={100 * record.train_acc:.2f} eval_acc={100 * record.eval_acc:.2f}"
        )

    if run_values["folds"] >= 2:
        if init is not None:
            raise ConfigError("--init-from is not supported with cross-validation")

        def fold_show(fold, record):
            print(f"fold {fold} ", end="")
            show(record)

        results, reports, mean = run_kfold(
            ds, model_cfg, train_cfg, run_values["folds"], split_seed=run_values["split_seed"],
            progress=fold_show,
        )
        for fold, (result, rep) in enumerate(zip(results, reports)):
            _train_artifacts(
                os.path.join(args.out, f"fold_{fold}"),
                result, rep, model_cfg, train_cfg, ds.class_names, run_values["split_seed"],
            )
        write_metrics_json(os.path.join(args.out, "metrics_mean.json"), mean)
        print(f"mean accuracy over {len(reports)} folds: {mean.accuracy:.2f}")
    else:
        plan = make_holdout_plan(ds, run_values["train_fraction"], seed=run_values["split_seed"])
        train_ds, test_ds = split(ds, plan)
        monitor_ds = test_ds
        if run_values["val_fraction"] > 0.0:
            # third-split mode: early stopping watches a slice carved from
            # the training side, keeping the test split untouched
            val_plan = make_holdout_plan(
                train_ds, 1.0 - run_values["val_fraction"], seed=run_values["split_seed"]
            )
            train_ds, monitor_ds = split(train_ds, val_plan)
        result = train(train_ds, monitor_ds, model_cfg, train_cfg, init=init, progress=show)
        model = Model(model_cfg, params=result.params)
        rep = report(model, test_ds)
        _train_artifacts(
            args.out, result, rep, model_cfg, train_cfg, ds.class_names, run_values["split_seed"]
        )
        if result.diverged:
            print("training diverged; best parameters before divergence were saved", file=sys.stderr)
        print(f"test accuracy: {rep.accuracy:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, sidecar = load_checkpoint(args.checkpoint)
    ds = load_image_dataset(args.data, model.cfg.image_size)
    if ds.class_names != sidecar["class_names"]:
        raise ConfigError(
            f"dataset classes {ds.class_names} do not match checkpoint classes {sidecar['class_names']}"
        )
    rep = report(model, ds)
    out_dir = args.out or args.checkpoint
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_json(os.path.join(out_dir, "metrics.json"), rep)
    write_confusion_csv(os.path.join(out_dir, "confusion.csv"), rep)
    write_roc_csv(os.path.join(out_dir, "roc.csv"), rep)
    print(f"accuracy: {rep.accuracy:.2f} over {rep.num_samples} samples")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _, sidecar = load_checkpoint(args.checkpoint)
    image = prepare_input(load_rgb_image(args.image), model.cfg.image_size)
    probs = model.forward(image).probs.data
    index = int(np.argmax(probs))
    payload = {
        "class": sidecar["class_names"][index],
        "index": index,
        "probs": [float(p) for p in probs],
    }
    print(json.dumps(payload))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; this pipeline reserves 2 for
    # data problems, so remap to 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tilevit", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"tilevit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_tile = sub.add_parser("tile", help="cut slides into filtered tiles")
    p_tile.add_argument("--input", required=True, help="directory of slide images")
    p_tile.add_argument("--out", required=True, help="where tiles/ and manifest.csv go")
    p_tile.add_argument("--tile-size", type=int, default=512)
    p_tile.add_argument("--stride", type=int, default=256)
    p_tile.add_argument("--bg-threshold", type=int, default=220)
    p_tile.add_argument("--min-tissue", type=float, default=0.05)
    p_tile.set_defaults(func=cmd_tile)

    p_train = sub.add_parser("train", help="fit a model on labeled images")
    p_train.add_argument("--data", required=True, help="directory with one subdirectory per class")
    p_train.add_argument("--out", required=True, help="artifact directory")
    p_train.add_argument("--config", help="key=value settings file")
    p_train.add_argument("--init-from", help="checkpoint directory to warm-start the backbone")
    for key, (parse, _) in CONFIG_KEYS.items():
        flag = "--" + key.replace("_", "-")
        if parse is _parse_bool:
            p_train.add_argument(flag, type=_parse_bool, default=None, metavar="BOOL")
        else:
            p_train.add_argument(flag, type=parse, default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on labeled images")
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p_eval.add_argument("--data", required=True, help="directory with one subdirectory per class")
    p_eval.add_argument("--out", help="metrics directory (default: the checkpoint directory)")
    p_eval.set_defaults(func=cmd_eval)

    p_predict = sub.add_parser("predict", help="classify one image")
    p_predict.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p_predict.add_argument("--image", required=True, help="image file to classify")
    p_predict.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
