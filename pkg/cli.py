#!/usr/bin/env python3
"""hyperseg command-line driver: data synthesis, training, evaluation and artifact dumps."""

import argparse
import logging
import sys
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np

from services.ablation import PRESETS, parse_selection
from services.config_validator import ConfigValidatorService
from services.configuration import ConfigurationService, RunConfig, coerce_value
from services.run_directory import RunDirectoryService, write_csv
from hyperseg.codecs import to_bytes_image, write_netpbm, write_tensor
from hyperseg.errors import ConfigError
from hyperseg.imgeo import augment
from hyperseg.net import SegmentationNet
from hyperseg.synthdata import (DatasetManifest, SceneSpec, generate_split, load_samples, read_dataset,
                              write_dataset)
from hyperseg.tensor_core import Tensor
from hyperseg.training import (PHASE_TRAIN, Adam, Metrics, TrainState, evaluate, fit, load_checkpoint,
                             new_state, pretrain, restore_state, save_checkpoint)
from hyperseg.uncertainty import entropy_uncertainty, scale_uncertainties
from hyperseg.uoic import (BACKGROUND_NEGATIVE, LESION_A, LESION_B, InstanceEmbedding, embed_sample,
                         mean_cosine, tag_small_lesions)

logger = logging.getLogger("hyperseg.cli")

COMMANDS = ("synth", "augment", "pretrain", "train", "eval", "ablate", "dump-uncertainty", "dump-embeddings")
BANNER = "=" * 60


@dataclass
class RunContext:
    """Resolved configuration plus the run directory of one command."""
    config: RunConfig
    run_dir: RunDirectoryService


@contextmanager
def session(config: RunConfig, root: Optional[str] = None, layout: bool = True) -> Iterator[RunContext]:
    run_dir = RunDirectoryService(config, root)
    run_dir.initialize(layout=layout)
    try:
        yield RunContext(config=config, run_dir=run_dir)
    finally:
        run_dir.close()


def banner(title: str, lines: Sequence[str] = ()) -> None:
    print(f"\n{BANNER}")
    print(title)
    print(BANNER)
    for line in lines:
        print(line)
    print(f"{BANNER}\n")


def metric_lines(metrics: Metrics) -> List[str]:
    return [f"{name:<10} {value:.4f}" for name, value in metrics.as_row().items()]


# Data helpers

def split_dir(config: RunConfig, key: str, split: str) -> str:
    explicit = getattr(config, key)
    if explicit:
        return explicit
    if config.data_dir:
        return str(Path(config.data_dir) / split)
    raise ConfigError(f"{key} is required (or set data_dir containing {split}/)")


def load_split(path: str):
    return load_samples(read_dataset(Path(path)))


def build_network(config: RunConfig) -> SegmentationNet:
    return SegmentationNet(config.network_spec(), seed=config.seed)


def load_network(config: RunConfig, checkpoint: str) -> SegmentationNet:
    network = build_network(config)
    network.load_state_dict(load_checkpoint(Path(checkpoint)).params)
    return network


# Commands

def cmd_synth(config: RunConfig, options: argparse.Namespace) -> int:
    scene = SceneSpec(**{**options.scene, "seed": config.seed})
    out = Path(config.data_dir or "data")
    counts = {"train": options.train_count, "val": options.val_count}
    with session(config, root=str(out), layout=False):
        for split, count in counts.items():
            samples = generate_split(scene, split, count)
            write_dataset(DatasetManifest(split=split, scene=scene, seed=config.seed), samples, out / split)
    banner("Synthetic dataset written", [f"Location: {out}", f"train: {counts['train']}  val: {counts['val']}"])
    return 0


def cmd_augment(config: RunConfig, options: argparse.Namespace) -> int:
    samples = load_split(split_dir(config, "train_dir", "train"))[:options.count]
    rows = []
    with session(config) as ctx:
        out = ctx.run_dir.dumps_dir("augment")
        for index, sample in enumerate(samples):
            seed = int(np.random.default_rng([config.seed, index]).integers(0, 2 ** 63 - 1))
            result = augment(sample.image, sample.mask, np.random.default_rng(seed),
                             (config.scale_min, config.scale_max), config.max_paste_retries, seed=seed)
            suffix = "pgm" if result.image.shape[0] == 1 else "ppm"
            write_netpbm(out / f"{sample.name}_image.{suffix}", to_bytes_image(result.image))
            write_netpbm(out / f"{sample.name}_mask.pgm", (result.mask.bits * 255).astype(np.uint8))
            if result.success:
                write_netpbm(out / f"{sample.name}_mask_a.pgm", (result.mask_a.bits * 255).astype(np.uint8))
                write_netpbm(out / f"{sample.name}_mask_b.pgm", (result.mask_b.bits * 255).astype(np.uint8))
            record = result.record
            center = record.center or ("", "")
            rows.append({"sample": sample.name, "seed": record.seed, "instance": record.instance_index,
                         "scale_factor": record.scale_factor, "center_row": center[0],
                         "center_col": center[1], "safety_radius": record.safety_radius,
                         "success": record.success, "attempts": record.attempts})
        ctx.run_dir.write_table("augment.csv", list(rows[0]) if rows else ["sample"], rows)
    succeeded = sum(1 for row in rows if row["success"])
    banner("Copy-paste previews written", [f"samples: {len(rows)}  pasted: {succeeded}  "
                                           f"fallbacks: {len(rows) - succeeded}"])
    return 0


def run_pretraining(ctx: RunContext, network: SegmentationNet, train_set) -> TrainState:
    config = ctx.config
    state = new_state(network, config.train_settings(), config.seed)

    def on_epoch(current: TrainState, row: dict) -> None:
        save_checkpoint(current, ctx.run_dir.checkpoint_dir(name="pretrain"), ctx.run_dir.config_text)
        ctx.run_dir.write_metrics(current.history)

    return pretrain(state, train_set, config.train_settings(), config.pretrain_epochs, on_epoch)


def run_training(ctx: RunContext) -> TrainState:
    """Full two-phase run: optional pretraining, then training with per-epoch checkpoints."""
    config = ctx.config
    settings = config.train_settings()
    train_set = load_split(split_dir(config, "train_dir", "train"))
    val_set = load_split(split_dir(config, "val_dir", "val"))
    network = build_network(config)
    state = new_state(network, settings, config.seed)

    if config.resume:
        restore_state(state, load_checkpoint(Path(config.resume)))
        logger.info("resumed from %s at epoch %d", config.resume, state.epoch)
    else:
        history = []
        if config.pretrained:
            network.load_pretrained(load_checkpoint(Path(config.pretrained)).params)
        elif config.uoic and config.pretrain_epochs > 0:
            history = list(run_pretraining(ctx, network, train_set).history)
        # the optimiser starts fresh after the handoff
        state = TrainState(network=network, optimizer=Adam(lr=settings.lr),
                           rng=np.random.default_rng(config.seed), seed=config.seed,
                           phase=PHASE_TRAIN, history=history)

    def on_epoch(current: TrainState, row: dict) -> None:
        save_checkpoint(current, ctx.run_dir.checkpoint_dir(epoch=current.epoch), ctx.run_dir.config_text)
        ctx.run_dir.write_metrics(current.history)

    return fit(state, train_set, val_set, settings, config.epochs, on_epoch)


def last_val_metrics(state: TrainState) -> Metrics:
    for row in reversed(state.history):
        if row.get("split") == "val":
            return Metrics(row["mIoU"], row["mDSC"], row["recall"], row["precision"])
    return Metrics()


def cmd_pretrain(config: RunConfig, options: argparse.Namespace) -> int:
    train_set = load_split(split_dir(config, "train_dir", "train"))
    with session(config) as ctx:
        state = run_pretraining(ctx, build_network(config), train_set)
        last = state.history[-1] if state.history else {}
    banner("Pretraining finished", [f"epochs: {state.epoch}", f"final loss: {last.get('loss', float('nan')):.6f}",
                                    f"checkpoint: {Path(config.run_dir) / 'checkpoints' / 'pretrain'}"])
    return 0


def cmd_train(config: RunConfig, options: argparse.Namespace) -> int:
    with session(config) as ctx:
        state = run_training(ctx)
    banner(f"Training finished after {state.epoch} epochs", metric_lines(last_val_metrics(state)))
    return 0


def cmd_eval(config: RunConfig, options: argparse.Namespace) -> int:
    network = load_network(config, config.checkpoint)
    dataset = load_split(split_dir(config, "val_dir", "val"))
    metrics, loss = evaluate(network, dataset, config.lambda_aux)
    with session(config) as ctx:
        row = {"phase": "eval", "split": "eval", "loss": loss, **metrics.as_row()}
        ctx.run_dir.write_metrics([row])
    banner(f"Evaluation on {len(dataset)} images", metric_lines(metrics) + [f"{'loss':<10} {loss:.6f}"])
    return 0


ABLATION_COLUMNS = ["experiment", "uoic", "base_hr", "unc_guidance", "fgbg_groups",
                    "parameters", "mIoU", "mDSC", "recall", "precision"]


def cmd_ablate(config: RunConfig, options: argparse.Namespace) -> int:
    rows = []
    with session(config) as ctx:
        for preset in parse_selection(options.experiments):
            variant = preset.apply(config)
            root = str(Path(config.run_dir) / "ablation" / f"exp_{preset.experiment}")
            with session(variant.with_overrides(run_dir=root)) as sub:
                state = run_training(sub)
            metrics = last_val_metrics(state)
            rows.append({"experiment": preset.experiment, **preset.flags(),
                         "parameters": state.network.num_parameters(), **metrics.as_row()})
            logger.info("experiment %d: mIoU=%.4f", preset.experiment, metrics.miou)
        ctx.run_dir.write_table("ablation.csv", ABLATION_COLUMNS, rows)
    banner("Ablation finished", [f"({row['experiment']}) mIoU {row['mIoU']:.4f}  mDSC {row['mDSC']:.4f}"
                                 for row in rows])
    return 0


def cmd_dump_uncertainty(config: RunConfig, options: argparse.Namespace) -> int:
    network = load_network(config, config.checkpoint)
    samples = load_split(split_dir(config, "val_dir", "val"))[:options.count]
    with session(config) as ctx:
        out = ctx.run_dir.dumps_dir("uncertainty")
        for sample in samples:
            result = network(sample.image, capture=config.debug_dumps)
            u = entropy_uncertainty(result.m_hat_up, config.eps)
            for tag, tensor in (("mhat", result.m_hat_up), ("u", u), ("yhat", result.y_hat)):
                write_tensor(out / f"{sample.name}_{tag}.uhrt", tensor.data)
                write_netpbm(out / f"{sample.name}_{tag}.pgm", to_bytes_image(tensor.data))
            targets = [e.shape[1:] for e in result.refined]
            for scale, u_i in enumerate(scale_uncertainties(result.m_hat, targets, config.eps)):
                write_tensor(out / f"{sample.name}_u{scale}.uhrt", u_i.data)
                write_netpbm(out / f"{sample.name}_u{scale}.pgm", to_bytes_image(u_i.data))
            for scale, capture in enumerate(result.captures):
                for key, value in capture.items():
                    write_tensor(out / f"{sample.name}_scale{scale}_{key}.uhrt", value)
    banner("Uncertainty maps written", [f"samples: {len(samples)}", f"location: {out}"])
    return 0


EMBEDDING_COLUMNS = ["sample", "source", "area", "small", "file"]


def cmd_dump_embeddings(config: RunConfig, options: argparse.Namespace) -> int:
    network = load_network(config, config.checkpoint)
    samples = load_split(split_dir(config, "train_dir", "train"))[:options.count]
    embeddings: List[InstanceEmbedding] = []
    positive_pairs, negative_pairs = [], []
    for index, sample in enumerate(samples):
        seed = int(np.random.default_rng([config.seed, index]).integers(0, 2 ** 63 - 1))
        augmented = augment(sample.image, sample.mask, np.random.default_rng(seed),
                            (config.scale_min, config.scale_max), config.max_paste_retries, seed=seed)
        features, y_hat_cp = network.pretrain_forward(Tensor(augmented.image))
        pooled = embed_sample(features, augmented, y_hat_cp)
        for source, vector, area in ((LESION_A, pooled.z_a, pooled.area_a), (LESION_B, pooled.z_b, pooled.area_b),
                                     (BACKGROUND_NEGATIVE, pooled.z_bg, 0)):
            if vector is not None:
                embeddings.append(InstanceEmbedding(vector.data.copy(), source, index, area))
        if pooled.z_a is not None and pooled.z_b is not None:
            positive_pairs.append((pooled.z_a.data, pooled.z_b.data))
            if pooled.z_bg is not None:
                negative_pairs.append((pooled.z_a.data, pooled.z_bg.data))

    cutoff = tag_small_lesions(embeddings)
    rows = []
    with session(config) as ctx:
        out = ctx.run_dir.dumps_dir("embeddings")
        for embedding in embeddings:
            name = f"{samples[embedding.sample_index].name}_{embedding.source}.uhrt"
            write_tensor(out / name, embedding.vector)
            rows.append({"sample": samples[embedding.sample_index].name, "source": embedding.source,
                         "area": embedding.area, "small": embedding.small, "file": f"embeddings/{name}"})
        write_csv(out.parent / "embeddings.csv", EMBEDDING_COLUMNS, rows)
        positive, negative = mean_cosine(positive_pairs), mean_cosine(negative_pairs)
        ctx.run_dir.write_table("embedding_summary.csv", ["pairs", "cos_a_b", "cos_a_bg", "small_area_cutoff"],
                                [{"pairs": len(positive_pairs), "cos_a_b": positive, "cos_a_bg": negative,
                                  "small_area_cutoff": cutoff}])
    banner("Embeddings written", [f"vectors: {len(embeddings)}", f"mean cos(z_A, z_B):  {positive:.4f}",
                                  f"mean cos(z_A, z_bg): {negative:.4f}"])
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "augment": cmd_augment,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "dump-uncertainty": cmd_dump_uncertainty,
    "dump-embeddings": cmd_dump_embeddings,
}

REQUIRED_PATHS = {
    "eval": ("checkpoint",),
    "dump-uncertainty": ("checkpoint",),
    "dump-embeddings": ("checkpoint",),
}


# Argument parsing

def _config_flag(key: str):
    def parse(text: str) -> Any:
        try:
            return coerce_value(key, text)
        except ConfigError as e:
            raise argparse.ArgumentTypeError(str(e))
    parse.__name__ = RunConfig.field_type(key).__name__
    return parse


def _range_flag(text: str):
    parts = [part for part in text.split(",") if part.strip()]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'low,high', got {text!r}")
    return tuple(float(part) for part in parts)


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration (overrides the config file)")
    defaults = RunConfig()
    for key in RunConfig.keys():
        group.add_argument(f"--{key.replace('_', '-')}", dest=key, type=_config_flag(key),
                           default=argparse.SUPPRESS, metavar=RunConfig.field_type(key).__name__.upper(),
                           help=f"default: {getattr(defaults, key)!r}")


def add_scene_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("scene generator")
    defaults = SceneSpec()
    for spec_field in fields(SceneSpec):
        if spec_field.name == "seed":
            continue
        default = getattr(defaults, spec_field.name)
        kind = _range_flag if isinstance(default, tuple) else type(default)
        group.add_argument(f"--scene-{spec_field.name.replace('_', '-')}", dest=f"scene_{spec_field.name}",
                           type=kind, default=default, help=f"default: {default!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description=__doc__)
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = commands.add_parser(name, help=HANDLERS[name].__name__.replace("cmd_", "").replace("_", " "))
        add_config_flags(sub)
        if name == "synth":
            sub.add_argument("--train-count", type=int, default=200)
            sub.add_argument("--val-count", type=int, default=50)
            add_scene_flags(sub)
        if name in ("augment", "dump-uncertainty", "dump-embeddings"):
            sub.add_argument("--count", type=int, default=16, help="number of samples to process")
        if name == "ablate":
            sub.add_argument("--experiments", default="all",
                             help=f"'all' or ids among 1-{len(PRESETS)}, e.g. 1,3,7")
    return parser


def resolve_config(options: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, Any] = {key: getattr(options, key) for key in RunConfig.keys() if hasattr(options, key)}
    config = ConfigurationService(options.config, overrides).get_run_config()
    ConfigValidatorService.for_paths(*REQUIRED_PATHS.get(options.command, ())).validate_or_raise(config)
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    options = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if options.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if options.command == "synth":
        options.scene = {key[len("scene_"):]: value for key, value in vars(options).items()
                         if key.startswith("scene_")}
    try:
        config = resolve_config(options)
        return HANDLERS[options.command](config, options)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
