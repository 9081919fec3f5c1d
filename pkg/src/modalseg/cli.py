"""Command-line surface: gen-data | train | eval | relevance.

Configuration comes from an optional JSON file with sections "data",
"model", "train", "loss", and "odds"; command-line flags override file
values, and the MODALSEG_SEED environment variable is the last-resort seed
default. Unknown sections or keys are rejected before any work starts.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or file-format
error, 4 non-finite loss during training, 5 evaluation produced NaN.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

from .binary_io import FormatError
from .checkpoint import load_model
from .dataio import (
    CHANNEL_NAMES,
    CLASS_NAMES,
    Dataset,
    SyntheticSpec,
    generate_synthetic_dataset,
)
from .evaluation import evaluate_matrix, render_report, standard_rows
from .losses import LossConfig, NonFiniteLossError
from .model import ModelConfig
from .relevance import OddsConfig, export_heatmap, relevance_report
from .trainer import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_EVAL = 5

SEED_ENV = "MODALSEG_SEED"
_SECTIONS = ("data", "model", "train", "loss", "odds")


class ConfigError(Exception):
    """Invalid configuration file or flag combination."""


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(
            f"config {path}: unknown sections {sorted(unknown)} (known: {list(_SECTIONS)})"
        )
    for section, value in raw.items():
        if not isinstance(value, dict):
            raise ConfigError(f"config {path}: section {section!r} must be an object")
    return raw


def _build(cls, values: dict, section: str, skip=()):
    allowed = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(
            f"section {section!r}: unknown keys {sorted(unknown)} (known: {sorted(allowed)})"
        )
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _apply_seed_default(section: dict, flag_seed) -> None:
    # Precedence: flag > config file > environment > dataclass default.
    if flag_seed is not None:
        section["seed"] = flag_seed
    elif "seed" not in section:
        env = _env_seed()
        if env is not None:
            section["seed"] = env


def _override(section: dict, **flags) -> None:
    for key, value in flags.items():
        if value is not None:
            section[key] = value


def cmd_gen_data(args) -> int:
    config = _load_config_file(args.config)
    data = dict(config.get("data", {}))
    _override(
        data,
        count=args.count,
        height=args.height,
        width=args.width,
        noise_sigma=args.noise_sigma,
    )
    _apply_seed_default(data, args.seed)
    spec = _build(SyntheticSpec, data, "data")
    spec.validate()

    dataset = generate_synthetic_dataset(spec, args.out)
    print(
        f"wrote {spec.count} samples ({len(dataset.train_ids)} train / "
        f"{len(dataset.test_ids)} test) to {dataset.root}, seed {spec.seed}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config_file(args.config)
    model_section = dict(config.get("model", {}))
    train_section = dict(config.get("train", {}))
    loss_section = dict(config.get("loss", {}))

    _override(
        train_section,
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        disc_learning_rate=args.d_lr,
        checkpoint_interval=args.checkpoint_interval,
    )
    if args.double_precision:
        train_section["double_precision"] = True
    _override(loss_section, alpha=args.alpha, beta=args.beta)
    _apply_seed_default(train_section, args.seed)
    # One seed flag drives both initializations unless the file pins them apart.
    if args.seed is not None or ("seed" not in model_section and "seed" in train_section):
        model_section["seed"] = train_section["seed"]

    model_cfg = _build(ModelConfig, model_section, "model")
    loss_cfg = _build(LossConfig, loss_section, "loss")
    train_cfg = _build(TrainConfig, train_section, "train", skip=("loss",))
    train_cfg = dataclasses.replace(train_cfg, loss=loss_cfg)

    state, final_ckpt, metrics_path = train(
        model_cfg, train_cfg, args.data, args.out, resume=args.resume
    )
    print(f"finished at step {state.step}; checkpoint {final_ckpt}; metrics {metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_model(args.checkpoint)
    dataset = Dataset.load(args.data)
    rows = (args.mask,) if args.mask else None
    report = evaluate_matrix(net, dataset, rows=rows)

    if any(math.isnan(v) for row in report.values.values() for v in row.values()):
        print("evaluation produced NaN Dice scores", file=sys.stderr)
        return EXIT_EVAL
    rendered = render_report(report, args.format)
    if args.out:
        Path(args.out).write_text(rendered)
    else:
        sys.stdout.write(rendered)
    return EXIT_OK


def cmd_relevance(args) -> int:
    config = _load_config_file(args.config)
    odds_cfg = _build(OddsConfig, dict(config.get("odds", {})), "odds")

    net = load_model(args.checkpoint)
    dataset = Dataset.load(args.data)
    sample_id = args.sample or (sorted(dataset.test_ids) or sorted(dataset.train_ids))[0]
    if sample_id not in dataset.test_ids + dataset.train_ids:
        raise ConfigError(f"sample {sample_id!r} is not in the dataset manifest")
    sample = dataset.read(sample_id)

    maps = relevance_report(net, sample.channels, odds_cfg)
    channels = [CHANNEL_NAMES.index(args.channel)] if args.channel else range(len(CHANNEL_NAMES))
    classes = [CLASS_NAMES.index(args.class_name)] if args.class_name else range(len(CLASS_NAMES))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for c in channels:
        for j in classes:
            stem = f"{sample_id}_{CHANNEL_NAMES[c]}_{CLASS_NAMES[j]}"
            export_heatmap(maps[c, j], out_dir / f"{stem}.ppm", out_dir / f"{stem}.wemp")
            written += 1
    print(f"wrote {written} heatmap/raw pairs for sample {sample_id} to {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modalseg",
        description="Missing-modality tolerant segmentation pipeline on synthetic data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset with an 80/20 split")
    p.add_argument("--config", help="JSON config file (section 'data')")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, help="number of samples (required here or in the config)")
    p.add_argument("--height", type=int, help="sample height (default 64)")
    p.add_argument("--width", type=int, help="sample width (default 64)")
    p.add_argument("--noise-sigma", type=float, help="pixel noise level (default 0.05)")
    p.add_argument("--seed", type=int, help=f"generator seed (default 7, or ${SEED_ENV})")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a generated dataset")
    p.add_argument("--config", help="JSON config file (sections model/train/loss)")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="directory for checkpoints and metrics")
    p.add_argument("--steps", type=int, help="training steps (default 2000)")
    p.add_argument("--batch-size", type=int, help="batch size (default 8)")
    p.add_argument("--lr", type=float, help="main learning rate (default 1e-3)")
    p.add_argument("--d-lr", type=float, help="discriminator learning rate (default 2e-4; 0 disables its updates)")
    p.add_argument("--alpha", type=float, help="dropped-channel loss weight (default 1.0)")
    p.add_argument("--beta", type=float, help="similarity loss weight (default 0.1; 0 gives the no-adaptation baseline)")
    p.add_argument("--checkpoint-interval", type=int, help="steps between checkpoints (default 500)")
    p.add_argument("--seed", type=int, help=f"training + init seed (default 1, or ${SEED_ENV})")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--double-precision", action="store_true", help="train in float64")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Dice matrix over full and missing-channel inputs")
    p.add_argument("--checkpoint", required=True, help="model or training checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--format", choices=("text", "csv", "json"), default="text")
    p.add_argument("--mask", choices=standard_rows(), help="evaluate a single row only")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("relevance", help="weight-of-evidence heatmaps for one sample")
    p.add_argument("--config", help="JSON config file (section 'odds')")
    p.add_argument("--checkpoint", required=True, help="model or training checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--sample", help="sample id (default: first test sample)")
    p.add_argument("--channel", choices=CHANNEL_NAMES, help="restrict to one channel")
    p.add_argument("--class", dest="class_name", choices=CLASS_NAMES, help="restrict to one class")
    p.add_argument("--out", default=".", help="output directory for .ppm/.wemp files")
    p.set_defaults(func=cmd_relevance)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
