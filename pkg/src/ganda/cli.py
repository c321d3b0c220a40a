"""``ganda`` command line: phantom, preprocess, train, predict, analyze.

Each subcommand reads an optional TOML or JSON config file; command-line
flags override config values. Exit codes are 0 on success, 1 for user errors
(bad config, missing inputs) and 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .errors import GandaError, InvalidConfig, MissingFile, RuntimeFailure, UserError

log = logging.getLogger("ganda")

# keys accepted at the top level of each command's config file
CONFIG_KEYS = {
    "phantom": {"seed", "n_slides", "n_test", "phantom"},
    "preprocess": {"slides", "patch_size", "channel_map"},
    "train": {"data", "seed", "source", "patch_size", "generator_filters", "train",
              "conditional"},
    "predict": {"checkpoint", "slide", "source", "patch_size", "batch_size"},
    "analyze": {"real", "predicted", "threshold", "roi_grid", "bin_um", "pixel_size_um"},
}


def load_config(path, command: str) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            cfg = json.loads(text)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            cfg = tomllib.loads(text)
    except ValueError as exc:
        raise InvalidConfig(f"cannot parse {path}: {exc}") from exc
    unknown = set(cfg) - CONFIG_KEYS[command]
    if unknown:
        raise InvalidConfig(f"unknown keys for '{command}': {sorted(unknown)}")
    return cfg


def _pick(args, cfg, name, default=None, cfg_key=None):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(cfg_key or name, default)


def _existing(path, what) -> Path:
    if path is None:
        raise InvalidConfig(f"no {what} given")
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"{what} not found: {path}")
    return path


def _require_out(args) -> Path:
    if args.out is None:
        raise InvalidConfig("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_phantom(args, cfg) -> int:
    from .phantom import PhantomParams, generate_dataset

    params = PhantomParams.from_dict(dict(cfg.get("phantom", {})))
    seed = _pick(args, cfg, "seed", params.seed)
    params = params.replace(seed=seed)
    out = _require_out(args)
    man = generate_dataset(int(cfg.get("n_slides", 6)), params, out, int(cfg.get("n_test", 1)))
    for e in man["slides"]:
        print(f"{e['file']}  {e['split']}  {e['sha256']}")
    return 0


def cmd_preprocess(args, cfg) -> int:
    from .slide_io import load_slide
    from .tiling import DEFAULT_PATCH_SIZE, write_patch_store

    slides = list(args.slides) or list(cfg.get("slides", []))
    if not slides:
        raise InvalidConfig("no input slides given")
    paths = [_existing(s, "slide") for s in slides]
    patch = int(_pick(args, cfg, "patch_size", DEFAULT_PATCH_SIZE))
    out = _require_out(args)
    for path in paths:
        slide = load_slide(path, channel_map=cfg.get("channel_map"))
        man = write_patch_store(slide, out, patch)
        print(f"{slide.slide_id}: {len(man.records)} tiles, {len(man.included)} included, "
              f"{len(man.excluded)} excluded")
    return 0


def cmd_train(args, cfg) -> int:
    from .networks import GeneratorSpec
    from .slide_io import SourceMode
    from .training import PatchDataset, TrainConfig, default_discriminator_spec, train

    data = _existing(_pick(args, cfg, "data"), "patch store")
    train_cfg = dict(cfg.get("train", {}))
    seed = _pick(args, cfg, "seed")
    if seed is not None:
        train_cfg["seed"] = int(seed)
    if args.epochs is not None:
        train_cfg["epochs"] = args.epochs
    train_cfg["deterministic"] = args.deterministic
    tc = TrainConfig.from_dict(train_cfg)
    mode = SourceMode.parse(_pick(args, cfg, "source", "BOTH"))
    dataset = PatchDataset.from_store(data)
    patch = dataset.patch_size
    if args.patch_size is not None and args.patch_size != patch:
        raise InvalidConfig(f"patch store holds {patch} px tiles, not {args.patch_size}")
    filters = cfg.get("generator_filters")
    gspec = GeneratorSpec.scaled(mode.channels, tuple(filters)) if filters \
        else GeneratorSpec(input_channels=mode.channels)
    conditional = bool(cfg.get("conditional", False))
    dspec = default_discriminator_spec(patch, mode.channels, conditional)
    out = _require_out(args)

    def progress(rec):
        log.info("epoch %d step %d d=%.4f g_adv=%.4f g_pix=%.5f", rec.epoch, rec.step,
                 rec.d_loss, rec.g_adv_loss, rec.g_pix_loss)

    ckpts = train(dataset, mode, tc, gspec, dspec, out_dir=out, progress=progress)
    final = ckpts[-1]
    if args.plots:
        _plot_losses(final.training_meta["loss_history"], out / "losses.png")
    print(f"trained {final.training_meta['epoch']} epochs on {len(dataset)} patches -> {out}")
    return 0


def cmd_predict(args, cfg) -> int:
    from .checkpoint import load_checkpoint
    from .inference import merge_channels, predict_slide
    from .slide_io import load_slide, save_slide

    ckpt = load_checkpoint(_existing(_pick(args, cfg, "checkpoint"), "checkpoint"))
    slide = load_slide(_existing(_pick(args, cfg, "slide"), "slide"))
    mode = _pick(args, cfg, "source", ckpt.training_meta.get("source_mode", "BOTH"))
    result = predict_slide(ckpt, slide, mode, _pick(args, cfg, "patch_size"),
                           int(cfg.get("batch_size", 8)))
    out = _require_out(args)
    result.write(out / f"{slide.slide_id}_np_pred.png")
    save_slide(merge_channels(slide, result), out / f"{slide.slide_id}_merged.tif")
    print(f"wrote {out / (slide.slide_id + '_merged.tif')}")
    return 0


def cmd_analyze(args, cfg) -> int:
    from .analysis import DEFAULT_BIN_UM, DEFAULT_THRESHOLD, compare_report, grid_rois
    from .slide_io import load_slide

    real = load_slide(_existing(_pick(args, cfg, "real"), "real slide"))
    pred = load_slide(_existing(_pick(args, cfg, "predicted"), "predicted slide"))
    rows, cols = cfg.get("roi_grid", (6, 6))
    rois = grid_rois(real.height_px, real.width_px, int(rows), int(cols))
    report = compare_report(real, pred, rois, cfg.get("threshold", DEFAULT_THRESHOLD),
                            cfg.get("pixel_size_um"), float(cfg.get("bin_um", DEFAULT_BIN_UM)))
    out = _require_out(args)
    (out / "report.json").write_text(report.to_json())
    if args.plots:
        _plot_report(report, out)
    r = report.regression
    print(f"R2={r.r_squared:.4f} slope={r.slope:.4f} mse={report.mse:.3f} "
          f"median real={report.distance_real.median_um:.2f}um "
          f"pred={report.distance_pred.median_um:.2f}um")
    return 0


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _plot_losses(history, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [h["step"] for h in history]
    for key in ("d_loss", "g_adv_loss", "g_pix_loss"):
        ax.plot(steps, [h[key] for h in history], label=key)
    ax.set_xlabel("step")
    ax.legend()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_report(report, out: Path):
    import numpy as np

    plt = _pyplot()
    x = np.array([d["np_real"] for d in report.densities])
    y = np.array([d["np_pred"] for d in report.densities])
    r = report.regression
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(x, y, s=12)
    xs = np.linspace(0, max(x.max(), 1e-3), 50)
    ax.plot(xs, r.intercept + r.slope * xs, "r-",
            label=f"y={r.slope:.3f}x+{r.intercept:.3f}, R²={r.r_squared:.3f}")
    ax.set_xlabel("real NP density")
    ax.set_ylabel("predicted NP density")
    ax.legend(fontsize=8)
    fig.savefig(out / "scatter.png", dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for stats, label in ((report.distance_real, "real"), (report.distance_pred, "predicted")):
        edges, counts = stats.histogram
        if counts.sum():
            ax.stairs(counts / counts.sum(), edges, label=label)
    ax.set_xlabel("distance to nearest vessel (µm)")
    ax.set_ylabel("fraction of NP pixels")
    ax.legend()
    fig.savefig(out / "distance_hist.png", dpi=100)
    plt.close(fig)


COMMANDS = {"phantom": cmd_phantom, "preprocess": cmd_preprocess, "train": cmd_train,
            "predict": cmd_predict, "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    common.add_argument("--plots", action="store_true", help="also write PNG plots")

    parser = argparse.ArgumentParser(prog="ganda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("phantom", parents=[common], help="generate a synthetic phantom dataset")

    p = sub.add_parser("preprocess", parents=[common], help="tile slides into a patch store")
    p.add_argument("slides", nargs="*")
    p.add_argument("--patch-size", type=int)

    p = sub.add_parser("train", parents=[common], help="train a generator/discriminator pair")
    p.add_argument("--data", help="patch store directory")
    p.add_argument("--source", type=str.upper, choices=["NUCLEI", "VESSEL", "BOTH"])
    p.add_argument("--patch-size", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("predict", parents=[common], help="predict the NP channel of a slide")
    p.add_argument("slide", nargs="?")
    p.add_argument("--checkpoint")
    p.add_argument("--source", type=str.upper, choices=["NUCLEI", "VESSEL", "BOTH"])
    p.add_argument("--patch-size", type=int)

    p = sub.add_parser("analyze", parents=[common], help="compare predicted and real NP channels")
    p.add_argument("real", nargs="?")
    p.add_argument("predicted", nargs="?")
    return parser


def _setup_logging():
    level = os.environ.get("GANDA_LOG", "error").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    torch.set_num_threads(1 if args.deterministic else args.threads)
    try:
        cfg = load_config(args.config, args.command)
        return COMMANDS[args.command](args, cfg)
    except UserError as exc:
        print(f"ganda {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeFailure, GandaError, OSError) as exc:
        print(f"ganda {args.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
