"""``viewflow`` command line: gen-data, train, synth, eval, confusion.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import (
    TrainingMode,
    apply_overrides,
    configured_log_level,
    configured_threads,
    dump_run_config,
    load_run_config,
)
from .dataset import DELTAS, SUPPORTED_SIZES, ViewStore, generate_dataset
from .errors import ConfigurationError, UsageError, ViewflowError
from .evaluation import (
    NetworkSynthesizer,
    OracleSynthesizer,
    confusion_matrix,
    evaluate,
)
from .images import load_png, save_png
from .network import OutputMode
from .trainer import train
from .visualize import confusion_heatmap, visualize_confidence, visualize_flow

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.ckpt"
LOG_NAME = "loss.log"
CONFIG_NAME = "config.json"
OVERLAY_SAMPLES = 64


def _threads(args: argparse.Namespace) -> int:
    return args.threads if args.threads is not None else configured_threads()


def cmd_gen_data(args: argparse.Namespace) -> None:
    generate_dataset(args.seed, args.instances, args.size, args.out, workers=_threads(args))


def cmd_train(args: argparse.Namespace) -> None:
    run = apply_overrides(
        load_run_config(args.config),
        seed=args.seed,
        mode=args.mode,
        iterations=args.iters,
        batch_size=args.batch,
        views=args.views,
        threads=args.threads if args.threads is not None else configured_threads(None),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_run_config(run, out / CONFIG_NAME)
    resume = load_checkpoint(out / CHECKPOINT_NAME) if args.resume else None
    final = train(run, ViewStore(args.data), out / CHECKPOINT_NAME, out / LOG_NAME, resume=resume)
    logger.info("finished at iteration %d; outputs in %s", final.iteration, out)


def _parse_list(value: str, what: str) -> list[str]:
    items = [item.strip() for item in value.split(",") if item.strip()]
    if not items:
        raise UsageError(f"--{what} needs at least one value")
    return items


def _parse_deltas(value: str) -> list[int]:
    deltas = []
    for item in _parse_list(value, "delta"):
        try:
            delta = int(item)
        except ValueError:
            raise UsageError(f"--delta value {item!r} is not an integer")
        if delta not in DELTAS:
            raise UsageError(f"--delta {delta} is not one of {DELTAS[0]}..{DELTAS[-1]} step 20")
        deltas.append(delta)
    return deltas


def _synthesizer(args: argparse.Namespace, store: ViewStore, views: int | None = None):
    if args.oracle:
        return OracleSynthesizer(store.manifest.image_size)
    if args.ckpt is None:
        raise UsageError("either --ckpt or --oracle is required")
    mask = load_checkpoint(args.mask_ckpt) if getattr(args, "mask_ckpt", None) else None
    return NetworkSynthesizer(load_checkpoint(args.ckpt), mask, views=views)


def cmd_synth(args: argparse.Namespace) -> None:
    inputs = _parse_list(args.input, "input")
    deltas = _parse_deltas(args.delta)
    if len(inputs) != len(deltas):
        raise UsageError(f"{len(inputs)} inputs but {len(deltas)} deltas")
    ckpt = load_checkpoint(args.ckpt)
    mask = load_checkpoint(args.mask_ckpt) if args.mask_ckpt else None
    synthesizer = NetworkSynthesizer(ckpt, mask, views=len(inputs) if len(inputs) > 1 else None)
    size = ckpt.config.image_size
    sources = [load_png(path) for path in inputs]
    for path, source in zip(inputs, sources):
        if source.shape[1:] != (size, size):
            raise ConfigurationError(
                f"{path} is {source.shape[2]}x{source.shape[1]}, checkpoint expects {size}x{size}"
            )

    synthesis = synthesizer.synthesize(sources, deltas)
    out = Path(args.out)
    if ckpt.config.mode == OutputMode.MASK:
        save_png(out / "mask.png", (synthesis.prediction >= 0.0).astype(np.float64))
        return
    save_png(out / "prediction.png", synthesis.prediction)
    for index, (source, flow) in enumerate(zip(sources, synthesis.flows)):
        overlay = visualize_flow(source, flow, OVERLAY_SAMPLES, args.seed)
        save_png(out / f"flow_{index}.png", overlay.image)
    for index, image in enumerate(visualize_confidence(synthesis.confidences)):
        save_png(out / f"confidence_{index}.png", image)


def cmd_eval(args: argparse.Namespace) -> None:
    if args.tuples < 1:
        raise UsageError("--tuples must be at least 1")
    store = ViewStore(args.data)
    report = evaluate(
        _synthesizer(args, store, views=args.views),
        store,
        split=args.split,
        tuples=args.tuples,
        seed=args.seed,
        threads=_threads(args),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")


def cmd_confusion(args: argparse.Namespace) -> None:
    store = ViewStore(args.data)
    matrix = confusion_matrix(
        _synthesizer(args, store),
        store,
        split=args.split,
        samples_per_cell=args.samples_per_cell,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "confusion.json").write_text(matrix.model_dump_json(indent=2) + "\n", encoding="utf-8")
    save_png(out / "confusion.png", confusion_heatmap(matrix.values(), matrix.bins))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewflow", description="View synthesis by appearance flow on a procedural sprite world"
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="render a sprite dataset")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--instances", type=int, default=20)
    gen.add_argument("--size", type=int, default=64, choices=SUPPORTED_SIZES)
    gen.add_argument("--out", required=True)
    gen.add_argument("--threads", type=int)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="train a network")
    tr.add_argument("--config", help="RunConfig JSON file; flags override its values")
    tr.add_argument("--data", required=True)
    tr.add_argument("--mode", type=TrainingMode, choices=list(TrainingMode))
    tr.add_argument("--iters", type=int)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--views", type=int, help="source views per tuple in multi-view modes")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--threads", type=int)
    tr.add_argument("--resume", action="store_true", help=f"continue from <out>/{CHECKPOINT_NAME}")
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    sy = sub.add_parser("synth", help="synthesize a novel view from input PNGs")
    sy.add_argument("--ckpt", required=True)
    sy.add_argument("--mask-ckpt", help="mask-mode checkpoint applied to the prediction")
    sy.add_argument("--input", required=True, help="comma-separated input PNGs")
    sy.add_argument("--delta", required=True, help="comma-separated azimuth deltas in degrees")
    sy.add_argument("--seed", type=int, default=0, help="seed for the flow overlay samples")
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval", help="mean foreground L1 over sampled tuples")
    ev.add_argument("--ckpt")
    ev.add_argument("--oracle", action="store_true", help="use the analytic warp instead of a network")
    ev.add_argument("--mask-ckpt", help="mask-mode checkpoint applied to predictions")
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test", choices=("train", "test"))
    ev.add_argument("--tuples", type=int, default=20_000)
    ev.add_argument("--views", type=int, help="input views per tuple for multi-view networks")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--threads", type=int)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    cf = sub.add_parser("confusion", help="cross-view confusion matrix and heatmap")
    cf.add_argument("--ckpt")
    cf.add_argument("--oracle", action="store_true")
    cf.add_argument("--data", required=True)
    cf.add_argument("--split", default="test", choices=("train", "test"))
    cf.add_argument("--samples-per-cell", type=int, default=10)
    cf.add_argument("--seed", type=int, default=0)
    cf.add_argument("--out", required=True)
    cf.set_defaults(func=cmd_confusion)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        level = logging.DEBUG if args.verbose else configured_log_level()
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ViewflowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
