"""Command-line entry point: ``python3 -m hsjp <command> [flags]``.

Every command builds and validates its full configuration (defaults, preset,
``--config`` file, flags) before touching the filesystem.  Checkpoints and
logs are written to a temporary file and renamed into place.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .checkpoint import CheckpointError, atomic_write, load_checkpoint, save_checkpoint
from .codecs import ImageDecodeError
from .config import ConfigError, build_config, parse_value, read_config_values
from .evaluation import (OKS_THRESHOLDS, evaluate_hsjp, evaluate_pose, format_table,
                         hsjp_eval_batch, to_input, transfer_sweep)
from .heatmap import STRIDE, render_targets, side_by_side_png
from .imaging import resize
from .model import GROUPS, predict
from .synthdata import gen_keypoint_corpus, gen_pretext_corpus, load_annotated, load_images, save_corpus
from .train import CONFIG_FIELDS, TrainConfig, finetune, pretrain, thread_limit

COMMANDS = ("synth", "pretrain", "finetune", "eval-hsjp", "eval-pose",
            "sweep-n", "sweep-freeze", "sweep-fraction", "viz")

PAPER_WARNING = ("warning: the paper preset (224 px, N=6, 240 epochs, batch 256) is not "
                 "feasible on a desk CPU; expect days of runtime")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ parser


def _config_flag_type(key):
    def convert(text):
        try:
            return parse_value(key, text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    convert.__name__ = key
    return convert


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags override --config values)")
    g.add_argument("--config", help="key = value file")
    g.add_argument("--preset", type=_config_flag_type("preset"), help="desk (default) or paper")
    for key, f in CONFIG_FIELDS.items():
        flag = "--" + key.replace("_", "-")
        if f.type.startswith("bool"):
            # bare flag means true; "--flag=false" is also accepted
            g.add_argument(flag, dest=key, nargs="?", const=True, default=None,
                           type=_config_flag_type(key), metavar="BOOL")
        else:
            g.add_argument(flag, dest=key, default=None, type=_config_flag_type(key),
                           metavar=key.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsjp", description="Heatmap-style jigsaw pretraining toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _add_config_flags(p)
        return p

    p = add("synth", "generate a synthetic corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--kind", choices=("pretext", "keypoint"), default="pretext")
    p.add_argument("--out", required=True, help="output directory")

    p = add("pretrain", "jigsaw-heatmap pretraining")
    p.add_argument("--data", required=True, help="directory of images")
    p.add_argument("--heldout", help="held-out image directory (default: last 10%% of --data)")
    p.add_argument("--out", required=True, help="checkpoint path; the metrics log goes to OUT.log")

    p = add("finetune", "keypoint finetuning")
    p.add_argument("--data", required=True, help="annotated corpus directory")
    p.add_argument("--init", help="pretrained checkpoint (default: train from scratch)")
    p.add_argument("--eval-data", help="annotated corpus scored during training")
    p.add_argument("--out", required=True, help="checkpoint path; the metrics log goes to OUT.log")

    p = add("eval-hsjp", "jigsaw precision and per-patch accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = add("eval-pose", "OKS mAP of a keypoint model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)

    p = add("sweep-n", "pretrain once per grid size N")
    p.add_argument("--data", required=True)
    p.add_argument("--heldout")
    p.add_argument("--values", default="2,3,4", help="comma-separated N values")

    p = add("sweep-freeze", "finetune once per freeze depth")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--init", help="pretrained checkpoint (default: scratch)")
    p.add_argument("--values", default=",".join(str(d) for d in range(len(GROUPS) + 1)))

    p = add("sweep-fraction", "finetune once per labelled fraction")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--init")
    p.add_argument("--values", default="0.1,0.25,0.5,1.0")

    p = add("viz", "predicted vs target heatmap mosaics as PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=4)
    return parser


# ----------------------------------------------------------------- helpers


def _config(args) -> TrainConfig:
    overrides = {k: getattr(args, k) for k in CONFIG_FIELDS}
    overrides["preset"] = args.preset
    values, source = {}, "<flags>"
    if args.config:
        _require(args.config, "config file")
        values, source = read_config_values(args.config), args.config
    config = build_config(values, overrides, source=source)
    preset = args.preset or values.get("preset", ("desk", 0))[0]
    if preset == "paper":
        print(PAPER_WARNING, file=sys.stderr)
    return config


def _require(path, what: str) -> None:
    if path is not None and not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def _values(text: str, kind):
    try:
        vals = [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse --values {text!r}") from None
    if not vals:
        raise UsageError("--values is empty")
    return vals


def _images(directory, size: int) -> list[np.ndarray]:
    out = []
    for img in load_images(directory):
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        if img.shape[:2] != (size, size):
            img = resize(img, size, size)
        out.append(img)
    return out


def _split(images, heldout_dir, size):
    if heldout_dir:
        return images, _images(heldout_dir, size)
    k = max(1, len(images) // 10)
    if len(images) <= k:
        raise UsageError("need at least two images to hold out a split")
    return images[:-k], images[-k:]


def _write_run(out: str, state, log_text: str) -> None:
    save_checkpoint(state, out)
    atomic_write(out + ".log", log_text.encode())


# ---------------------------------------------------------------- commands


def cmd_synth(args, config):
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if args.kind == "pretext":
        save_corpus(args.out, images=gen_pretext_corpus(args.count, config.size, config.seed))
    else:
        save_corpus(args.out, samples=gen_keypoint_corpus(args.count, config.size, config.seed))
    print(f"wrote {args.count} {args.kind} images to {args.out}")


def cmd_pretrain(args, config):
    _require(args.heldout, "held-out directory")
    train, heldout = _split(_images(args.data, config.size), args.heldout, config.size)
    result = pretrain(train, config, heldout)
    _write_run(args.out, result.state, result.log_text)
    best = result.records[result.best_epoch]
    print(format_table(["best_epoch", "precision", "patch_accuracy"],
                       [(result.best_epoch, best.precision, best.accuracy)]))


def cmd_finetune(args, config):
    _require(args.init, "checkpoint")
    _require(args.eval_data, "evaluation directory")
    init = load_checkpoint(args.init) if args.init else None
    samples = load_annotated(args.data)
    evals = load_annotated(args.eval_data) if args.eval_data else None
    result = finetune(samples, init, config, evals)
    _write_run(args.out, result.state, result.log_text)
    if evals is not None:
        print(format_table(["map"], [(result.records[-1].map,)]))


def _hsjp_n(state, config) -> int:
    n = int(round(np.sqrt(state.head_channels)))
    if n * n != state.head_channels:
        raise UsageError(f"checkpoint head has {state.head_channels} channels, not a jigsaw head")
    if n != config.n:
        config = replace(config, n=n).validate()
    return n


def cmd_eval_hsjp(args, config):
    state = load_checkpoint(args.ckpt)
    n = _hsjp_n(state, config)
    report = evaluate_hsjp(state, _images(args.data, config.size), n, config.size,
                           config.eps, config.seed)
    print(format_table(["metric", "value"], [
        ("n", n), ("images", report.solved + report.failed),
        ("precision", report.precision), ("patch_accuracy", report.patch_accuracy)]))


def cmd_eval_pose(args, config):
    state = load_checkpoint(args.ckpt)
    report = evaluate_pose(state, load_annotated(args.data))
    rows = [(f"AP@{t:.2f}", report.summary.ap[t]) for t in OKS_THRESHOLDS]
    rows += [("mAP", report.map), ("invalid", report.summary.n_invalid)]
    print(format_table(["metric", "value"], rows))


def cmd_sweep_n(args, config):
    values = _values(args.values, int)
    configs = [replace(config, n=n).validate() for n in values]
    _require(args.heldout, "held-out directory")
    train, heldout = _split(_images(args.data, config.size), args.heldout, config.size)
    rows = []
    for cfg in configs:
        state = pretrain(train, cfg, heldout).state
        report = evaluate_hsjp(state, heldout, cfg.n, cfg.size, cfg.eps, cfg.seed)
        rows.append((cfg.n, report.precision, report.patch_accuracy))
        print(f"n={cfg.n} done", file=sys.stderr)
    print(format_table(["n", "precision", "patch_accuracy"], rows))


def _finetune_inputs(args):
    _require(args.init, "checkpoint")
    init = load_checkpoint(args.init) if args.init else None
    return init, load_annotated(args.data), load_annotated(args.eval_data)


def cmd_sweep_freeze(args, config):
    depths = _values(args.values, int)
    for d in depths:
        replace(config, freeze_depth=d).validate()
    init, samples, evals = _finetune_inputs(args)
    rows = transfer_sweep(init, samples, evals, depths, config)
    print(format_table(["freeze_depth", "map"], rows))


def cmd_sweep_fraction(args, config):
    fractions = _values(args.values, float)
    configs = [replace(config, fraction=f).validate() for f in fractions]
    init, samples, evals = _finetune_inputs(args)
    rows = []
    for cfg in configs:
        state = finetune(samples, init, cfg).state
        rows.append((cfg.fraction, evaluate_pose(state, evals).map))
    print(format_table(["fraction", "map"], rows))


def cmd_viz(args, config):
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    state = load_checkpoint(args.ckpt)
    out = config.size // STRIDE
    if os.path.exists(os.path.join(args.data, "annotations.txt")):
        samples = load_annotated(args.data)[:args.count]
        if state.head_channels != len(samples[0].keypoints):
            raise UsageError(f"checkpoint predicts {state.head_channels} channels but the "
                             f"annotations have {len(samples[0].keypoints)} keypoints")
        images = [resize(s.image, config.size, config.size) if s.image.shape[0] != config.size
                  else s.image for s in samples]
        scale = np.array([[config.size / s.image.shape[1], config.size / s.image.shape[0]]
                          for s in samples])[:, None, :]
        centers = np.stack([s.keypoints for s in samples]) * scale / STRIDE
        targets = render_targets(centers, config.keypoint_sigma, out, out,
                                 visible=np.stack([s.visible for s in samples])).data
        batch = np.stack([to_input(img) for img in images])
        if state.in_channels == 6:
            batch = np.concatenate([batch, batch], axis=1)
    else:
        n = _hsjp_n(state, config)
        images = _images(args.data, config.size)[:args.count]
        batch, centers = hsjp_eval_batch(images, n, config.size, config.seed,
                                         concat_unshuffled=state.in_channels == 6)
        sigma = replace(config, n=n).target_sigma
        targets = render_targets(centers, sigma, out, out).data
    pred = predict(state, batch)
    os.makedirs(args.out, exist_ok=True)
    for i, (p, t) in enumerate(zip(pred, targets)):
        atomic_write(os.path.join(args.out, f"viz_{i:05d}.png"), side_by_side_png(p, t))
    print(f"wrote {len(pred)} mosaics to {args.out}")


HANDLERS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "eval-hsjp": cmd_eval_hsjp, "eval-pose": cmd_eval_pose, "sweep-n": cmd_sweep_n,
    "sweep-freeze": cmd_sweep_freeze, "sweep-fraction": cmd_sweep_fraction, "viz": cmd_viz,
}


def run(argv=None) -> int:
    """Parse ``argv`` and execute one command.  Returns the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        config = _config(args)
        for attr in ("data", "eval_data", "ckpt"):
            _require(getattr(args, attr, None), attr.replace("_", "-"))
        with thread_limit(config):
            HANDLERS[args.command](args, config)
    except (ConfigError, CheckpointError, ImageDecodeError, UsageError,
            FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
