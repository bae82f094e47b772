import click
from click import formatting
from click_default_group import DefaultGroup
from contextlib import contextmanager
import logging
import os
import sys

import numpy as np

from .arch import ARCH_OPTIONS, DEFAULT_ARCH, ArchConfig, build_combinet, load_config_document
from .bayes import (
    evaluate,
    format_mean_std,
    mc_predict,
    mean_entropy,
    miou,
    render_metrics_csv,
    save_entropy_png,
    save_mask_png,
)
from .checkpoint import load_checkpoint
from .cost import REPORT_FORMATS, count_macs, render_report
from .data import (
    Sample,
    channel_stats,
    load_dataset,
    load_image,
    load_pair,
    normalize_channels,
    normalize_dataset,
    read_manifest,
    shape_painters,
    split,
    synth_dataset,
    write_dataset,
)
from .plugins import pm
from .trainer import DEFAULT_TRAIN, TRAIN_OPTIONS, TrainConfig, train as run_training
from .utils import (
    CheckpointError,
    CombinetError,
    ConfigError,
    DatasetError,
    RunManifest,
    load_json_file,
    parse_option_value,
    run_directory,
    substream,
    write_atomic,
)
from .version import __version__

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


class Setting(click.ParamType):
    "name:value override of an architecture or training option"
    name = "setting"

    def convert(self, setting, param, ctx):
        if ":" not in setting:
            self.fail('"{}" should be name:value'.format(setting), param, ctx)
            return
        name, value = setting.split(":", 1)
        if "." in name:
            section, name = name.split(".", 1)
            tables = {"arch": DEFAULT_ARCH, "train": DEFAULT_TRAIN}
            if section not in tables or name not in tables[section]:
                self.fail("{}.{} is not a valid option".format(section, name), param, ctx)
                return
        else:
            sections = [
                section
                for section, table in (("arch", DEFAULT_ARCH), ("train", DEFAULT_TRAIN))
                if name in table
            ]
            if not sections:
                self.fail(
                    "{} is not a valid option (--help-config to see all)".format(name), param, ctx
                )
                return
            if len(sections) > 1:
                self.fail(
                    "{} is ambiguous, use arch.{} or train.{}".format(name, name, name), param, ctx
                )
                return
            section = sections[0]
        default = (DEFAULT_ARCH if section == "arch" else DEFAULT_TRAIN)[name]
        try:
            return section, name, parse_option_value(name, value, default)
        except ConfigError as e:
            self.fail(e.message, param, ctx)


class InputShape(click.ParamType):
    "HxWxC, e.g. 224x224x3"
    name = "HxWxC"

    def convert(self, value, param, ctx):
        bits = value.lower().split("x")
        if len(bits) != 3 or not all(bit.isdigit() and int(bit) > 0 for bit in bits):
            self.fail('"{}" should look like 224x224x3'.format(value), param, ctx)
            return
        h, w, c = (int(bit) for bit in bits)
        return (1, c, h, w)


class CombinetGroup(DefaultGroup):
    "Remembers the arguments it was invoked with, for run manifests"

    invocation_args = None

    def main(self, args=None, *posargs, **kwargs):
        CombinetGroup.invocation_args = list(sys.argv[1:] if args is None else args)
        return super().main(args, *posargs, **kwargs)


@contextmanager
def reported_errors():
    try:
        yield
    except CombinetError as e:
        click.secho(
            "{}{}".format("{}: ".format(e.title) if e.title else "", e.message),
            fg="red",
            err=True,
        )
        sys.exit(e.exit_code)


def show_config_options(options):
    formatter = formatting.HelpFormatter()
    with formatter.section("Config options"):
        formatter.write_dl(
            [
                (option.name, "{} (default={})".format(option.help, option.default))
                for option in options
            ]
        )
    click.echo(formatter.getvalue())


def overrides_for(settings, section):
    return {name: value for s, name, value in settings if s == section}


# Commands that re-run from the config recorded in their run manifest, with
# the config keys each one needs
REPLAYS = {}


def replays(command, *keys):
    def register(fn):
        REPLAYS[command] = (fn, keys)
        return fn

    return register


def start_run(root, command, argv=None):
    run_dir = run_directory(root, command)
    if argv is None:
        argv = CombinetGroup.invocation_args or []
    manifest = RunManifest(command, argv, version=__version__)
    return run_dir, manifest


def finish_run(run_dir, manifest):
    path = os.path.join(run_dir, "manifest.json")
    manifest.write(path)
    return path


@click.group(cls=CombinetGroup, default="count", default_if_no_args=True)
@click.version_option(version=__version__)
@click.option("-v", "--verbose", count=True, help="Log progress (repeat for debug output)")
def cli(verbose):
    """
    Compact Bayesian segmentation networks: cost reports, training and
    Monte-Carlo-Dropout inference.
    """
    if verbose:
        logging.basicConfig(
            level=logging.DEBUG if verbose > 1 else logging.INFO,
            format="%(asctime)s %(name)s %(levelname)s %(message)s",
        )


run_root_option = click.option(
    "--run-root",
    default="run",
    type=click.Path(file_okay=False),
    help="Directory that receives <timestamp>-<command> run directories",
)
settings_option = click.option(
    "settings",
    "--set",
    type=Setting(),
    multiple=True,
    help="Override a config option using name:value",
)


@cli.command()
@click.argument("arch", default="combinet-s")
@click.option(
    "--input",
    "input_shape",
    type=InputShape(),
    default="224x224x3",
    help="Input size as HxWxC",
)
@click.option("--samples", type=click.IntRange(min=1), default=1, help="MC samples S")
@click.option("--format", "fmt", type=click.Choice(REPORT_FORMATS), default="text")
@settings_option
@run_root_option
@click.option("--help-config", is_flag=True, help="Show available architecture options")
def count(arch, input_shape, samples, fmt, settings, run_root, help_config):
    "Count parameters and MACs of an architecture preset or config file"
    if help_config:
        show_config_options(ARCH_OPTIONS)
        return
    with reported_errors():
        arch_data = dict(load_config_document(arch)["arch"])
        arch_data.update(overrides_for(settings, "arch"))
        config = {
            "arch": ArchConfig.from_dict(arch_data).validate().to_dict(),
            "input": list(input_shape),
            "samples": samples,
            "format": fmt,
        }
        run_count(config, run_root)


@replays("count", "arch", "input", "samples", "format")
def run_count(config, run_root, argv=None):
    arch = ArchConfig.from_dict(config["arch"]).validate()
    input_shape = tuple(config["input"])
    if input_shape[1] != arch.input_channels:
        raise ConfigError(
            "--input has {} channels, the architecture expects {}".format(
                input_shape[1], arch.input_channels
            )
        )
    report = count_macs(build_combinet(arch), input_shape, config["samples"])
    output = render_report(report, config["format"])
    run_dir, manifest = start_run(run_root, "count", argv)
    manifest.config = config
    report_path = os.path.join(run_dir, "cost.{}".format("csv" if config["format"] == "csv" else "txt"))
    write_atomic(report_path, output)
    manifest.add_artifact("report", report_path)
    finish_run(run_dir, manifest)
    click.echo(output.decode("utf8"), nl=False)


def _train_document(config, train_config, settings, seed, epochs):
    doc = load_config_document(config)
    arch_data = dict(doc["arch"])
    arch_data.update(overrides_for(settings, "arch"))
    train_data = dict(doc["train"])
    if train_config:
        extra = load_json_file(train_config, "training config")
        if not isinstance(extra, dict):
            raise ConfigError("Training config {} must be a JSON object".format(train_config))
        train_data.update(extra.get("train", extra))
    train_data.update(overrides_for(settings, "train"))
    if seed is not None:
        train_data["seed"] = seed
    if epochs is not None:
        train_data["epochs"] = epochs
    arch = ArchConfig.from_dict(arch_data).validate()
    return arch, TrainConfig.from_dict(train_data).validate()


@cli.command()
@click.argument("config")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option(
    "--train-config",
    type=click.Path(exists=True, dir_okay=False),
    help="JSON file with training options",
)
@click.option(
    "--val-manifest",
    type=click.Path(exists=True, dir_okay=False),
    help="Separate validation manifest (default: split off --val-fraction)",
)
@click.option("--val-fraction", type=click.FloatRange(0, 1), default=0.2, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), help="Override the training seed")
@click.option("--epochs", type=click.IntRange(min=0), help="Override the number of epochs")
@click.option(
    "--resume",
    type=click.Path(exists=True, dir_okay=False),
    help="Continue from a checkpoint written by a previous run",
)
@settings_option
@run_root_option
@click.option("--help-config", is_flag=True, help="Show available training options")
def train(
    config,
    manifest,
    train_config,
    val_manifest,
    val_fraction,
    seed,
    epochs,
    resume,
    settings,
    run_root,
    help_config,
):
    "Train a network on a dataset manifest"
    if help_config:
        show_config_options(TRAIN_OPTIONS)
        return
    with reported_errors():
        arch, train_cfg = _train_document(config, train_config, settings, seed, epochs)
        run_train(
            {
                "arch": arch.to_dict(),
                "train": train_cfg.to_dict(),
                "manifest": manifest,
                "val_manifest": val_manifest,
                "val_fraction": val_fraction,
                "resume": resume,
            },
            run_root,
        )


@replays("train", "arch", "train", "manifest", "val_manifest", "val_fraction", "resume")
def run_train(config, run_root, argv=None):
    arch = ArchConfig.from_dict(config["arch"]).validate()
    train_cfg = TrainConfig.from_dict(config["train"]).validate()
    samples = load_dataset(config["manifest"], train_cfg.ignore_index)
    if config["val_manifest"]:
        train_samples = samples
        val_samples = load_dataset(config["val_manifest"], train_cfg.ignore_index)
    else:
        val_fraction = config["val_fraction"]
        train_samples, val_samples = split(samples, (1 - val_fraction, val_fraction), train_cfg.seed)
    mean, std = channel_stats(train_samples)
    std = np.where(std > 0, std, 1.0)
    val_samples = normalize_dataset(val_samples, mean, std)
    start_epoch, state = 0, None
    resume = config["resume"]
    if resume:
        checkpoint = load_checkpoint(resume)
        if ArchConfig.from_dict(checkpoint.arch) != arch:
            raise CheckpointError(
                "Checkpoint {} was trained with a different architecture".format(resume)
            )
        graph, state, start_epoch = checkpoint.graph, checkpoint.state, checkpoint.epoch
    else:
        graph = build_combinet(arch, seed=train_cfg.seed)
    run_dir, run_manifest = start_run(run_root, "train", argv)
    run_manifest.config = config
    run_manifest.seeds = {"seed": train_cfg.seed}
    checkpoint_path = os.path.join(run_dir, "best.cbn")
    log_path = os.path.join(run_dir, "train_log.csv")
    run_manifest.add_artifact("checkpoint", checkpoint_path)
    run_manifest.add_artifact("log", log_path)
    try:
        result = run_training(
            graph,
            train_samples,
            val_samples,
            train_cfg,
            augment=train_cfg.augment_spec(mean, std),
            checkpoint_path=checkpoint_path,
            log_path=log_path,
            state=state,
            start_epoch=start_epoch,
            meta={"normalize": {"mean": list(mean), "std": list(std)}},
        )
    finally:
        finish_run(run_dir, run_manifest)
    click.echo(
        "Trained {} epochs on {} samples; best val mIoU {} at epoch {}".format(
            train_cfg.epochs - start_epoch,
            len(train_samples),
            "-" if result.best_epoch is None or result.best_miou < 0 else "{:.4f}".format(result.best_miou),
            "-" if result.best_epoch is None else result.best_epoch,
        )
    )
    click.echo(run_dir)


def _prepare(image, checkpoint):
    normalize = checkpoint.meta.get("normalize")
    if normalize:
        return normalize_channels(image, normalize["mean"], normalize["std"])
    return image


def _image_seed(seed, name, index):
    return int(substream(seed, name, index).integers(2 ** 31))


@cli.command(name="eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--samples", type=click.IntRange(min=1), default=30, show_default=True)
@click.option("--repeats", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--no-dropout", is_flag=True, help="Single deterministic pass per image")
@run_root_option
def eval_command(checkpoint, manifest, samples, repeats, seed, no_dropout, run_root):
    "Evaluate mIoU and mean entropy over repeated MC runs"
    with reported_errors():
        run_eval(
            {
                "checkpoint": checkpoint,
                "manifest": manifest,
                "samples": samples,
                "repeats": repeats,
                "dropout": not no_dropout,
                "seed": seed,
            },
            run_root,
        )


@replays("eval", "checkpoint", "manifest", "samples", "repeats", "dropout", "seed")
def run_eval(config, run_root, argv=None):
    ckpt = load_checkpoint(config["checkpoint"])
    ignore_index = ckpt.train.get("ignore_index", 255)
    dataset = load_dataset(config["manifest"], ignore_index)
    dataset = [
        Sample(_prepare(s.image, ckpt), s.mask, s.ignore_index, s.meta) for s in dataset
    ]
    num_classes = ckpt.graph.output_channels
    run_dir, run_manifest = start_run(run_root, "eval", argv)
    run_manifest.config = config
    run_manifest.seeds = {"seed": config["seed"]}
    mious, entropies, results = [], [], []
    for repeat in range(config["repeats"]):
        result = evaluate(
            ckpt.graph,
            dataset,
            config["samples"],
            _image_seed(config["seed"], "repeat", repeat),
            num_classes,
            ignore_index,
            dropout=config["dropout"],
        )
        results.append(result)
        mious.append(result.miou)
        entropies.append(result.mean_entropy)
    lines = ["repeat,miou,mean_entropy"]
    lines.extend(
        "{},{:.6f},{:.6f}".format(i, m, e) for i, (m, e) in enumerate(zip(mious, entropies))
    )
    summary_path = os.path.join(run_dir, "eval.csv")
    write_atomic(summary_path, "\n".join(lines) + "\n")
    metrics_path = os.path.join(run_dir, "metrics.csv")
    write_atomic(metrics_path, render_metrics_csv(results[0].rows))
    run_manifest.add_artifact("summary", summary_path)
    run_manifest.add_artifact("metrics", metrics_path)
    finish_run(run_dir, run_manifest)
    click.echo("mIoU {}".format(format_mean_std(mious, 100.0, 1)))
    click.echo("mean entropy {}".format(format_mean_std(entropies, 1.0, 2)))
    click.echo("class IoU:")
    for class_id, iou in enumerate(results[0].class_iou):
        click.echo("  {:>3}  {}".format(class_id, "-" if np.isnan(iou) else "{:.1f}".format(100 * iou)))


def _infer_entries(path):
    if path.lower().endswith(IMAGE_EXTENSIONS):
        return [(path, None)]
    entries = read_manifest(path)
    if not entries:
        raise DatasetError("Manifest {} lists no images".format(path))
    return entries


@cli.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("input_path", metavar="INPUT", type=click.Path(exists=True, dir_okay=False))
@click.option("--samples", type=click.IntRange(min=1), default=30, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--no-dropout", is_flag=True, help="Single deterministic pass per image")
@run_root_option
def infer(checkpoint, input_path, samples, seed, no_dropout, run_root):
    "Predict masks and entropy maps for an image or an image manifest"
    with reported_errors():
        run_infer(
            {
                "checkpoint": checkpoint,
                "input": input_path,
                "samples": samples,
                "dropout": not no_dropout,
                "seed": seed,
            },
            run_root,
        )


@replays("infer", "checkpoint", "input", "samples", "dropout", "seed")
def run_infer(config, run_root, argv=None):
    ckpt = load_checkpoint(config["checkpoint"])
    num_classes = ckpt.graph.output_channels
    ignore_index = ckpt.train.get("ignore_index", 255)
    entries = _infer_entries(config["input"])
    run_dir, run_manifest = start_run(run_root, "infer", argv)
    run_manifest.config = config
    run_manifest.seeds = {"seed": config["seed"]}
    rows = []
    for index, (image_path, mask_path) in enumerate(entries):
        if mask_path:
            sample = load_pair(image_path, mask_path, ignore_index)
            image, target = sample.image, sample.mask
        else:
            image, target = load_image(image_path), None
        image_id = os.path.splitext(os.path.basename(image_path))[0]
        result = mc_predict(
            ckpt.graph,
            _prepare(image, ckpt),
            config["samples"],
            _image_seed(config["seed"], "infer", index),
            dropout=config["dropout"],
        )
        mask_out = os.path.join(run_dir, "{}-mask.png".format(image_id))
        entropy_out = os.path.join(run_dir, "{}-entropy.png".format(image_id))
        save_mask_png(result.mask, mask_out)
        save_entropy_png(result.entropy, entropy_out, num_classes)
        run_manifest.add_artifact("{}-mask".format(image_id), mask_out)
        run_manifest.add_artifact("{}-entropy".format(image_id), entropy_out)
        image_miou = None
        if target is not None:
            image_miou = miou(result.mask, target, num_classes, ignore_index)
        entropy_value = mean_entropy(result.entropy)
        rows.append((image_id, image_miou, entropy_value))
        click.echo("{}\tmean entropy {:.4f}".format(image_id, entropy_value))
    metrics_path = os.path.join(run_dir, "metrics.csv")
    write_atomic(metrics_path, render_metrics_csv(rows))
    run_manifest.add_artifact("metrics", metrics_path)
    finish_run(run_dir, run_manifest)


@cli.command()
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Dataset directory")
@click.option("--n", "num_samples", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--size", type=click.IntRange(min=16), default=64, show_default=True)
@click.option("--classes", type=click.IntRange(min=2), default=2, show_default=True)
@click.option("--shape", default="discs", show_default=True, help="Shape kind, e.g. discs or stripes")
@click.option("--radius", type=click.IntRange(min=1), help="Fixed disc radius")
@click.option("--noise", type=click.FloatRange(min=0), default=0.05, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@run_root_option
def synth(out, num_samples, size, classes, shape, radius, noise, seed, run_root):
    "Generate a synthetic segmentation dataset with a manifest"
    with reported_errors():
        run_synth(
            {
                "out": out,
                "n": num_samples,
                "size": size,
                "classes": classes,
                "shape": shape,
                "radius": radius,
                "noise": noise,
                "seed": seed,
            },
            run_root,
        )


@replays("synth", "out", "n", "size", "classes", "shape", "radius", "noise", "seed")
def run_synth(config, run_root, argv=None):
    shape = config["shape"]
    if shape not in shape_painters():
        raise ConfigError(
            "Unknown shape {!r}, available: {}".format(shape, ", ".join(sorted(shape_painters())))
        )
    samples = synth_dataset(
        config["n"],
        config["size"],
        config["classes"],
        shape,
        config["noise"],
        substream(config["seed"], "synth"),
        radius=config["radius"],
    )
    out = config["out"]
    try:
        manifest_path = write_dataset(samples, out)
    except OSError as e:
        raise DatasetError("Could not write dataset to {}: {}".format(out, e.strerror or e))
    run_dir, run_manifest = start_run(run_root, "synth", argv)
    run_manifest.config = config
    run_manifest.seeds = {"seed": config["seed"]}
    run_manifest.add_artifact("manifest", manifest_path)
    finish_run(run_dir, run_manifest)
    click.echo(manifest_path)


@cli.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
def replay(manifest):
    """
    Re-run the command recorded in a run manifest, using the configuration
    stored in the manifest rather than current presets or defaults
    """
    with reported_errors():
        recorded = RunManifest.load(manifest)
        if recorded.command not in REPLAYS:
            raise ConfigError("Run manifest {} records no replayable command".format(manifest))
        run, keys = REPLAYS[recorded.command]
        if not isinstance(recorded.config, dict):
            raise ConfigError("Run manifest {} has no recorded config".format(manifest))
        missing = [key for key in keys if key not in recorded.config]
        if missing:
            raise ConfigError(
                "Run manifest {} cannot be replayed".format(manifest),
                problems=["config is missing {!r}".format(key) for key in missing],
            )
        if recorded.version != __version__:
            click.secho(
                "Run was recorded by combinet {}, replaying with {}".format(recorded.version, __version__),
                fg="yellow",
                err=True,
            )
        # The new run directory goes next to the one being replayed
        run_root = os.path.dirname(os.path.dirname(os.path.abspath(manifest)))
        click.echo("Replaying: combinet {}".format(" ".join(recorded.argv)), err=True)
        run(recorded.config, run_root, recorded.argv)


# Commands contributed by plugins
pm.hook.register_commands(cli=cli)
