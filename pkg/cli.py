"""Command-line entry point: synth, train, eval, infer, rerun, serve.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError

from config import APP_VERSION, MANIFEST_FILENAME, ConfigFileError, load_config_file, resolve_seed, settings
from models_checkpoint import load_checkpoint
from models_schemas import Direction, RunManifest, Task, TrainConfig
from services_data import (
    SPLIT_PRESETS,
    load_paired,
    materialize,
    resolve_split,
    split,
    synth_shapes,
    to_unpaired,
    write_image,
)
from services_metrics import (
    DEFAULT_THRESHOLD,
    binarize,
    binary_to_unit,
    cycle_reconstruction_error,
    evaluate,
    format_report,
    predict,
    translate_masks,
    translate_payload,
    triptych,
)
from services_pdf import pdf_generator
from services_training import loss_stability, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Invalid combination of options, reported with exit code 2."""


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def non_negative_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def positive_float(text: str) -> float:
    value = non_negative_float(text)
    if value == 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return value


def task_name(text: str) -> str:
    if text not in {t.value for t in Task}:
        raise argparse.ArgumentTypeError(f"invalid task {text!r} (choose from {', '.join(t.value for t in Task)})")
    return text


# Train options that may also come from --config; value None means "not given on the command line"
TRAIN_OPTIONS: Dict[str, Callable[[str], Any]] = {
    "task": task_name,
    "data": str,
    "out": str,
    "epochs": positive_int,
    "train_count": positive_int,
    "test_count": positive_int,
    "preset": str,
    "seed": int,
    "image_size": positive_int,
    "lambda_l1": non_negative_float,
    "lambda_cycle": non_negative_float,
    "lr": positive_float,
    "batch_size": positive_int,
    "base_channels": positive_int,
    "depth": positive_int,
    "disc_base_channels": positive_int,
    "disc_layers": positive_int,
    "checkpoint_every": positive_int,
}

TRAIN_DEFAULTS: Dict[str, Any] = {
    "epochs": TrainConfig.model_fields["epochs"].default,
    "image_size": TrainConfig.model_fields["image_size"].default,
    "lambda_l1": TrainConfig.model_fields["lambda_l1"].default,
    "lambda_cycle": TrainConfig.model_fields["lambda_cycle"].default,
    "lr": TrainConfig.model_fields["learning_rate"].default,
    "batch_size": TrainConfig.model_fields["batch_size"].default,
    "base_channels": TrainConfig.model_fields["generator_base_channels"].default,
    "depth": TrainConfig.model_fields["generator_depth"].default,
    "disc_base_channels": TrainConfig.model_fields["discriminator_base_channels"].default,
    "disc_layers": TrainConfig.model_fields["discriminator_stride2_layers"].default,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskgan", description="GAN-based segmentation: image -> mask translation")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default from MASKGAN_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", metavar="{synth,train,eval,infer,rerun,serve}")
    sub.required = True

    p = sub.add_parser("synth", help="Write a synthetic shapes dataset")
    p.add_argument("--n", type=positive_int, required=True, help="Number of samples")
    p.add_argument("--size", type=positive_int, default=32, help="Image side length (>= 16)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="Dataset root (images/ and masks/ are created)")

    p = sub.add_parser("train", help="Train a CGAN or CycleGAN")
    p.add_argument("--config", default=None, help="key=value file; command-line flags take precedence")
    p.add_argument("--task", type=task_name, default=None, help="cgan or cyclegan")
    p.add_argument("--data", default=None, help="Dataset root with images/ and masks/")
    p.add_argument("--out", default=None, help="Output directory")
    p.add_argument("--epochs", type=positive_int, default=None)
    p.add_argument("--train-count", type=positive_int, default=None)
    p.add_argument("--test-count", type=positive_int, default=None)
    p.add_argument("--preset", choices=sorted(SPLIT_PRESETS), default=None, help="Published split counts")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--image-size", type=positive_int, default=None)
    p.add_argument("--lambda-l1", type=non_negative_float, default=None)
    p.add_argument("--lambda-cycle", type=non_negative_float, default=None)
    p.add_argument("--lr", type=positive_float, default=None)
    p.add_argument("--batch-size", type=positive_int, default=None)
    p.add_argument("--base-channels", type=positive_int, default=None, help="Generator width")
    p.add_argument("--depth", type=positive_int, default=None, help="Generator encoder depth")
    p.add_argument("--disc-base-channels", type=positive_int, default=None)
    p.add_argument("--disc-layers", type=positive_int, default=None, help="Discriminator stride-2 layers")
    p.add_argument("--checkpoint-every", type=positive_int, default=None)

    p = sub.add_parser("eval", help="Evaluate a checkpoint on its held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--direction", choices=[d.value for d in Direction], default=Direction.A2B.value)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--pdf", action="store_true", help="Also write report.pdf")

    p = sub.add_parser("infer", help="Run the generator on one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--direction", choices=[d.value for d in Direction], default=Direction.A2B.value)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--raw", action="store_true", help="Write the continuous output instead of a binary mask")

    p = sub.add_parser("rerun", help="Re-execute the command recorded in a manifest")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("serve", help="Start the inference HTTP service")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=positive_int, default=8000)
    return parser


# ---------- Manifest ----------

def write_manifest(
    out_dir: Path,
    command: str,
    arguments: Dict[str, Any],
    started: float,
    inputs: Sequence[str] = (),
    artifacts: Sequence[Path] = (),
    seed: Optional[int] = None,
    config: Optional[Dict[str, Any]] = None,
) -> Path:
    manifest = RunManifest(
        command=command,
        arguments=arguments,
        config=config,
        inputs=list(inputs),
        seed=seed,
        artifacts=[str(a) for a in artifacts],
        duration_seconds=round(time.perf_counter() - started, 3),
        version=APP_VERSION,
    )
    path = Path(out_dir) / MANIFEST_FILENAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return path


def manifest_argv(manifest: RunManifest) -> List[str]:
    """Command line equivalent to a manifest's resolved arguments."""
    argv = [manifest.command]
    for key, value in manifest.arguments.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            if value:
                argv.append(flag)
        elif value is not None:
            argv += [flag, str(value)]
    return argv


# ---------- Commands ----------

def cmd_synth(n: int, size: int, seed: int, out_dir: str) -> Path:
    started = time.perf_counter()
    ds = synth_shapes(n, size, seed)
    written = materialize(ds, out_dir)
    return write_manifest(
        Path(out_dir), "synth", {"n": n, "size": size, "seed": seed, "out": out_dir}, started,
        artifacts=written, seed=seed,
    )


def resolve_train_options(args: argparse.Namespace) -> Dict[str, Any]:
    """Merge flag > config file > environment > default for every train option."""
    file_values = load_config_file(args.config) if args.config else {}
    unknown = sorted(set(file_values) - set(TRAIN_OPTIONS))
    if unknown:
        raise UsageError(f"Unknown keys in config file {args.config}: {', '.join(unknown)}")

    resolved: Dict[str, Any] = {}
    for key, convert in TRAIN_OPTIONS.items():
        value = getattr(args, key)
        if value is None and key in file_values:
            try:
                value = convert(file_values[key])
            except (argparse.ArgumentTypeError, ValueError) as e:
                raise UsageError(f"Config file value for {key}: {e}")
        resolved[key] = value

    resolved["seed"] = resolve_seed(resolved["seed"])
    if resolved["checkpoint_every"] is None:
        resolved["checkpoint_every"] = settings.CHECKPOINT_EVERY
    for key, default in TRAIN_DEFAULTS.items():
        if resolved[key] is None:
            resolved[key] = default

    if resolved["task"] is None:
        raise UsageError(f"--task is required (choose from {', '.join(t.value for t in Task)})")
    for key in ("data", "out"):
        if resolved[key] is None:
            raise UsageError(f"--{key} is required")
    if resolved["preset"] is not None and resolved["preset"] not in SPLIT_PRESETS:
        raise UsageError(f"Unknown preset {resolved['preset']!r} (choose from {', '.join(sorted(SPLIT_PRESETS))})")
    return resolved


def cmd_train(options: Dict[str, Any]) -> Path:
    """Train from fully resolved options; returns the checkpoint path."""
    started = time.perf_counter()
    ds = load_paired(options["data"], options["image_size"])
    spec = resolve_split(len(ds), options["train_count"], options["test_count"], options["preset"], options["seed"])
    train_ds, test_ds = split(ds, spec)

    try:
        cfg = TrainConfig(
            task=Task(options["task"]),
            epochs=options["epochs"],
            batch_size=options["batch_size"],
            learning_rate=options["lr"],
            lambda_l1=options["lambda_l1"],
            lambda_cycle=options["lambda_cycle"],
            seed=options["seed"],
            image_size=options["image_size"],
            image_channels=ds.image_channels,
            generator_base_channels=options["base_channels"],
            generator_depth=options["depth"],
            discriminator_base_channels=options["disc_base_channels"],
            discriminator_stride2_layers=options["disc_layers"],
            checkpoint_every=options["checkpoint_every"],
            split=spec,
        )
    except ValidationError as e:
        raise UsageError(f"Invalid training configuration: {e}")

    data = to_unpaired(train_ds, cfg.seed) if cfg.task == Task.CYCLEGAN else train_ds
    out_dir = Path(options["out"])
    ckpt = train(cfg, data, out_dir)

    for term, std in loss_stability(ckpt.history).items():
        logger.info(f"Loss stability {term}: std={std:.5f} over the last epochs")

    artifacts = sorted(out_dir.glob("checkpoint*.mgan")) + [out_dir / "losses.csv"]
    # Resolved counts replace the preset so the manifest alone reproduces the split
    arguments = {k: v for k, v in options.items() if k != "preset"}
    arguments.update(train_count=spec.n_train, test_count=spec.n_test)
    write_manifest(
        out_dir, "train", arguments, started,
        inputs=[options["data"]], artifacts=artifacts, seed=cfg.seed, config=cfg.model_dump(mode="json"),
    )
    return out_dir / "checkpoint.mgan"


def cmd_eval(checkpoint: str, data_dir: str, out_dir: str, direction: str, threshold: float, pdf: bool) -> Path:
    started = time.perf_counter()
    ckpt = load_checkpoint(checkpoint)
    direction = Direction(direction)
    generator = ckpt.generator(direction)

    ds = load_paired(data_dir, ckpt.image_size, channels=ckpt.config.image_channels)
    _, test_ds = split(ds, ckpt.config.split) if ckpt.config.split is not None else (None, ds)
    out = Path(out_dir)
    artifacts: List[Path] = []

    if direction == Direction.B2A:
        result = translate_masks(generator, test_ds)
        for sample, generated in zip(test_ds, result.images):
            artifacts.append(write_image(generated, out / "generated" / sample.name))
            artifacts.append(triptych(sample.mask, sample.image, generated, out / "triptychs" / sample.name))
        summary = {"direction": direction.value, "n_samples": len(test_ds), "mean_l1": result.mean_l1}
        report_path = out / "translation.json"
        report_path.write_text(json.dumps(summary, indent=2), encoding="utf-8")
        artifacts.append(report_path)
        logger.info(f"Generated {len(test_ds)} images from masks, mean L1 vs real images {result.mean_l1:.4f}")
    else:
        report = evaluate(generator, test_ds, threshold)
        predictions = predict(generator, [s.image for s in test_ds])
        figures = []
        for sample, pred in zip(test_ds, predictions):
            predicted_mask = binary_to_unit(binarize(pred, threshold))
            figures.append(triptych(sample.image, sample.mask, predicted_mask, out / "triptychs" / sample.name))
        artifacts += figures

        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(format_report(report), encoding="utf-8")
        (out / "report.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
        artifacts += [out / "report.txt", out / "report.json"]

        details = {"Task": ckpt.task.value, "Epochs trained": str(ckpt.epochs_trained)}
        if ckpt.task == Task.CYCLEGAN:
            cycle = cycle_reconstruction_error(ckpt.models["gen_ab"], ckpt.models["gen_ba"], [s.image for s in test_ds])
            details["A->B->A reconstruction L1"] = f"{cycle:.4f}"
            logger.info(f"Cycle reconstruction L1 on the test images: {cycle:.4f}")
        if pdf:
            pdf_bytes = pdf_generator.generate_report_pdf(
                report, f"Segmentation report: {Path(checkpoint).name}", details,
                stability=loss_stability(ckpt.history), figures=figures,
            )
            (out / "report.pdf").write_bytes(pdf_bytes)
            artifacts.append(out / "report.pdf")

    return write_manifest(
        out, "eval",
        {"checkpoint": checkpoint, "data": data_dir, "out": out_dir, "direction": direction.value,
         "threshold": threshold, "pdf": pdf},
        started, inputs=[checkpoint, data_dir], artifacts=artifacts, seed=ckpt.data_seed,
    )


def cmd_infer(checkpoint: str, image_path: str, out_path: str, direction: str, threshold: float, raw: bool) -> Path:
    ckpt = load_checkpoint(checkpoint)
    direction = Direction(direction)
    generator = ckpt.generator(direction)
    source = Path(image_path)
    try:
        payload = source.read_bytes()
    except OSError as e:
        raise OSError(f"Cannot read input image {source}: {e.strerror or e}") from e
    output = translate_payload(
        generator, payload, from_mask=direction == Direction.B2A, threshold=threshold, raw=raw, source=str(source)
    )
    return write_image(output, out_path)


def cmd_rerun(manifest_path: str) -> int:
    try:
        manifest = RunManifest.model_validate_json(Path(manifest_path).read_text(encoding="utf-8"))
    except OSError as e:
        raise OSError(f"Cannot read manifest {manifest_path}: {e.strerror or e}") from e
    argv = manifest_argv(manifest)
    logger.info(f"Re-running: {' '.join(argv)}")
    return main(argv)


def cmd_serve(host: str, port: int, checkpoint: Optional[str]) -> None:
    import uvicorn

    if checkpoint:
        settings.CHECKPOINT_PATH = checkpoint
    uvicorn.run("main:app", host=host, port=port, log_level=settings.LOG_LEVEL.lower())


# ---------- Entry point ----------

def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "synth":
        seed = resolve_seed(args.seed)
        if args.size < 16:
            raise UsageError(f"--size must be >= 16, got {args.size}")
        cmd_synth(args.n, args.size, seed, args.out)
    elif args.command == "train":
        cmd_train(resolve_train_options(args))
    elif args.command == "eval":
        cmd_eval(args.checkpoint, args.data, args.out, args.direction, args.threshold, args.pdf)
    elif args.command == "infer":
        cmd_infer(args.checkpoint, args.image, args.out, args.direction, args.threshold, args.raw)
    elif args.command == "rerun":
        return cmd_rerun(args.manifest)
    elif args.command == "serve":
        cmd_serve(args.host, args.port, args.checkpoint)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    level = (args.log_level or settings.LOG_LEVEL).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return _dispatch(args)
    except (UsageError, ConfigFileError) as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
