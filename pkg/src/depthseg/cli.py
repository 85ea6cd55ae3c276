"""``depthseg`` command-line entry point.

Subcommands: gen-data, train, eval, ablate, export. Exit codes: 0 success,
2 config error, 3 data error (including missing files), 4 numerical divergence.
Output directories default to ``$DEPTHSEG_OUT/<command>`` (``runs/`` when unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from depthseg.config import ConfigError, RunConfig, load_config
from depthseg.data import (
    IGNORE_ID,
    DataError,
    DatasetManifest,
    Sample,
    SyntheticSpec,
    center_crop,
    class_palette,
    depth_extension,
    gen_synthetic,
    load_dataset,
    read_depth,
    read_labels,
    sample_to_tensors,
    write_depth,
    write_labels,
)
from depthseg.depth_space import DepthMap
from depthseg.training import (
    ABLATIONS,
    DivergenceError,
    evaluate,
    evaluate_predictions,
    fit,
    format_ablation_table,
    load_network,
    predict_metric,
    run_ablations,
)

logger = logging.getLogger("depthseg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
OUT_ENV = "DEPTHSEG_OUT"

# command-line spelling of each ablation variant
ABLATION_SLUGS = {
    "only-depth": "only Depth",
    "only-seg": "only Seg",
    "no-critic": "w/o Critic",
    "one-critic": "w one Critic",
    "two-critics": "w two Critics",
    "linear": "Linear Space",
    "log": "Log Space",
}


class UsageError(ConfigError):
    pass


def default_out(command: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / command


def prepare_out(path: Optional[str], command: str, force: bool) -> Path:
    out = Path(path) if path else default_out(command)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to replace it)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def parse_counts(text: str) -> dict[str, int]:
    """``TRAIN[,VAL[,TEST]]``; a single number applies to train only."""
    try:
        values = [int(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"--count expects comma-separated integers, got {text!r}") from None
    if not 1 <= len(values) <= 3 or min(values) < 0:
        raise UsageError(f"--count expects 1 to 3 non-negative integers, got {text!r}")
    names = ("train", "val", "test")
    return {names[i]: n for i, n in enumerate(values)}


def parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().replace("x", ",").split(",")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"--size expects N or HxW, got {text!r}") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) < 1:
        raise UsageError(f"--size expects N or HxW, got {text!r}")
    return dims[0], dims[1]


def parse_sets(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def load_split(data: str, split: str) -> tuple[list[Sample], DatasetManifest]:
    manifest = DatasetManifest.load(data)
    return list(load_dataset(data, split, manifest)), manifest


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    height, width = parse_size(args.size)
    counts = parse_counts(args.count)
    try:
        spec = SyntheticSpec(height=height, width=width, num_classes=args.classes, d_min=args.dmin, d_max=args.dmax)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = prepare_out(args.out, "data", args.force)
    try:
        gen_synthetic(out, args.seed, counts, spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(out / "manifest.json")
    return EXIT_OK


def run_config(args) -> tuple[RunConfig, set[str]]:
    overrides = parse_sets(args.set or [])
    if args.ablation:
        overrides = {**ABLATIONS[ABLATION_SLUGS[args.ablation]], **overrides}
    if args.steps is not None:
        overrides["train.total_steps"] = str(args.steps)
    if args.seed is not None:
        overrides["train.seed"] = str(args.seed)
    return load_config(args.config, overrides)


def fit_to_dataset(cfg: RunConfig, explicit: set[str], manifest: DatasetManifest) -> RunConfig:
    """Take image size and class count from the dataset unless set explicitly,
    in which case they must agree with it."""
    size = cfg.train.center_crop or tuple(manifest.image_size)
    if any(c > d for c, d in zip(size, manifest.image_size)):
        raise UsageError(f"train.center_crop {size} is larger than the dataset frames {tuple(manifest.image_size)}")
    data_values = {"model.img_size": tuple(size), "model.num_classes": manifest.num_classes}
    flat = cfg.to_flat()
    for key, value in data_values.items():
        if key in explicit and tuple(np.atleast_1d(flat[key])) != tuple(np.atleast_1d(value)):
            raise UsageError(f"{key} = {flat[key]} but the dataset has {value}")
    return cfg.with_overrides({k: v for k, v in data_values.items() if k not in explicit})


def cmd_train(args) -> int:
    cfg, explicit = run_config(args)
    train, manifest = load_split(args.data, "train")
    val = list(load_dataset(args.data, "val", manifest))
    if not train:
        raise DataError(f"{args.data}: training split is empty")
    cfg = fit_to_dataset(cfg, explicit, manifest)
    if args.resume:
        # a resumed run continues in place, usually in the directory holding the checkpoint
        out = Path(args.out) if args.out else default_out("train")
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = prepare_out(args.out, "train", args.force)

    def progress(step: int, record: dict) -> None:
        if args.log_every and (step + 1) % args.log_every == 0:
            logger.info("step %d  l_total %.4f  l_depth %.4f  l_seg %.4f", step + 1,
                        record["l_total"], record["l_depth"], record["l_seg"])

    report = fit(cfg, train, val, manifest, out_dir=out, resume_from=args.resume, stop_at=args.stop_at,
                 on_step=progress)
    if report.evals:
        print(json.dumps(report.final_eval(), sort_keys=True))
    print(out)
    return EXIT_OK


def format_tables(report: dict) -> str:
    def fmt(key, nd=3):
        v = report.get(key)
        return "-" if v is None else f"{v:.{nd}f}"

    miou = "-" if report.get("miou") is None else f"{100 * report['miou']:.2f}"

    depth_cols = [("AbsRel ↓", "abs_rel"), ("SqRel ↓", "sq_rel"), ("RMSE ↓", "rmse"), ("RMSE log ↓", "rmse_log"),
                  ("δ<1.25 ↑", "delta1"), ("δ<1.25² ↑", "delta2"), ("δ<1.25³ ↑", "delta3")]
    lines = ["| " + " | ".join(h for h, _ in depth_cols) + " |",
             "|" + "|".join("---" for _ in depth_cols) + "|",
             "| " + " | ".join(fmt(k) for _, k in depth_cols) + " |",
             "",
             "| RMSE ↓ | mIoU ↑ |",
             "|---|---|",
             f"| {fmt('rmse')} | {miou} |"]
    return "\n".join(lines) + "\n"


def read_predictions(pred_dir: Path, samples: Sequence[Sample]):
    pairs = []
    for s in samples:
        depth_paths = [p for p in (pred_dir / "depth" / f"{s.id}{ext}" for ext in (".png", ".npy")) if p.exists()]
        label_path = pred_dir / "label" / f"{s.id}.png"
        depth = read_depth(depth_paths[0]).values if depth_paths else None
        labels = read_labels(label_path) if label_path.exists() else None
        if depth is None and labels is None:
            raise DataError(f"{pred_dir}: no prediction files for sample {s.id}")
        pairs.append((depth, labels, s))
    return pairs


def cmd_eval(args) -> int:
    samples, manifest = load_split(args.data, args.split)
    if not samples:
        raise DataError(f"{args.data}: split {args.split!r} is empty")
    if args.checkpoint:
        try:
            net, cfg = load_network(args.checkpoint)
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from exc
        samples = [center_crop(s, cfg.train.center_crop) for s in samples]
        report = evaluate(net, samples, manifest, cfg.train.depth_space, cfg.train.eval_batch_size)
        default = Path(args.checkpoint).resolve().parent.parent / "eval"
    else:
        pred_dir = Path(args.predictions)
        if not pred_dir.is_dir():
            raise DataError(f"prediction directory not found: {pred_dir}")
        report = evaluate_predictions(read_predictions(pred_dir, samples), manifest)
        default = pred_dir
    out = Path(args.out) if args.out else default
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.split}.report").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    table = format_tables(report)
    (out / f"{args.split}.table.md").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    overrides = parse_sets(args.set or [])
    if args.steps is not None:
        overrides["train.total_steps"] = str(args.steps)
    base, explicit = load_config(args.config, overrides)
    train, manifest = load_split(args.data, "train")
    val = list(load_dataset(args.data, "val", manifest))
    if not train or not val:
        raise DataError(f"{args.data}: ablations need non-empty train and val splits")
    base = fit_to_dataset(base, explicit, manifest)
    out = prepare_out(args.out, "ablate", args.force)
    results = run_ablations(base, train, val, manifest, out_dir=out)
    table = format_ablation_table(results)
    (out / "ablation.table.md").write_text(table)
    (out / "ablation.report").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    print(table, end="")
    return EXIT_OK


def colorize_depth(depth: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    from matplotlib import colormaps

    valid = depth > 0
    u = np.log(np.clip(depth, d_min, d_max) / d_min) / np.log(d_max / d_min)
    rgb = colormaps["magma_r"](u)[..., :3]
    rgb[~valid] = 0.0
    return rgb


def colorize_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    palette = class_palette(num_classes)
    out = np.zeros(labels.shape + (3,))
    known = labels < num_classes
    out[known] = palette[labels[known]]
    return out


def composite(sample: Sample, depth: np.ndarray, labels: np.ndarray, manifest: DatasetManifest) -> np.ndarray:
    """input | gt depth | pred depth | gt labels | pred labels, side by side."""
    k, lo, hi = manifest.num_classes, manifest.d_min, manifest.d_max
    gt_depth = np.where(sample.depth.valid, sample.depth.values, 0.0)
    panels = [
        sample.image,
        colorize_depth(gt_depth, lo, hi),
        colorize_depth(depth, lo, hi),
        colorize_labels(sample.labels, k),
        colorize_labels(labels, k),
    ]
    return np.concatenate([np.clip(p, 0, 1) for p in panels], axis=1)


def plot_loss_curve(records_path: Path, out_path: Path) -> bool:
    if not records_path.exists():
        return False
    records = [json.loads(line) for line in records_path.read_text().splitlines() if line.strip()]
    if not records:
        return False
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("l_total", "l_depth", "l_seg"):
        ax.plot(steps, [r[key] for r in records], label=key, linewidth=1)
    ax.set_xlabel("generator step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return True


def cmd_export(args) -> int:
    samples, manifest = load_split(args.data, args.split)
    if args.limit is not None:
        samples = samples[: args.limit]
    if args.ground_truth:
        depth = [np.where(s.depth.valid, s.depth.values, 0.0) for s in samples]
        labels = [s.labels for s in samples]
        run_dir = None
    else:
        if not args.checkpoint:
            raise UsageError("export needs --checkpoint or --ground-truth")
        try:
            net, cfg = load_network(args.checkpoint)
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from exc
        samples = [center_crop(s, cfg.train.center_crop) for s in samples]
        depth, labels = [], []
        for i in range(0, len(samples), 20):
            chunk = samples[i : i + 20]
            images = torch.stack([sample_to_tensors(s, manifest).image for s in chunk])
            d, lab = predict_metric(net, images, manifest.depth_range, cfg.train.depth_space)
            depth += list(d) if d is not None else [None] * len(chunk)
            labels += list(lab) if lab is not None else [None] * len(chunk)
        run_dir = Path(args.checkpoint).resolve().parent.parent
    out = prepare_out(args.out, "export", args.force)
    for sub in ("depth", "label", "composite"):
        (out / sub).mkdir()
    for s, d, lab in zip(samples, depth, labels):
        if d is not None:
            write_depth(out / "depth" / f"{s.id}{depth_extension(manifest.d_max)}", DepthMap(d, d > 0))
        if lab is not None:
            write_labels(out / "label" / f"{s.id}.png", lab)
        d_panel = d if d is not None else np.zeros(s.labels.shape)
        l_panel = lab if lab is not None else np.full(s.labels.shape, IGNORE_ID)
        comp = composite(s, d_panel, l_panel, manifest)
        Image.fromarray(np.rint(comp * 255).astype(np.uint8)).save(out / "composite" / f"{s.id}.png")
    if run_dir is not None:
        plot_loss_curve(run_dir / "log.records", out / "loss_curve.png")
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthseg", description="Joint depth and segmentation training toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", default="500,100", help="TRAIN[,VAL[,TEST]] scene counts")
    g.add_argument("--size", default="64", help="N or HxW")
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--dmin", type=float, default=0.1)
    g.add_argument("--dmax", type=float, default=10.0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    def run_flags(q, single: bool):
        q.add_argument("--config", help="flat key = value file")
        q.add_argument("--data", required=True)
        q.add_argument("--out")
        q.add_argument("--steps", type=int, help="train.total_steps")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
        q.add_argument("--force", action="store_true")
        if single:
            q.add_argument("--seed", type=int, help="train.seed")
            q.add_argument("--ablation", choices=sorted(ABLATION_SLUGS))

    t = sub.add_parser("train", help="train one model")
    run_flags(t, single=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="stop after this generator step")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or exported predictions")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="directory written by export")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train the ablation grid and write its table")
    run_flags(a, single=False)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export", help="write predictions, composites and the loss curve")
    x.add_argument("--checkpoint")
    x.add_argument("--ground-truth", action="store_true", help="export the ground truth in prediction format")
    x.add_argument("--data", required=True)
    x.add_argument("--split", default="val")
    x.add_argument("--limit", type=int)
    x.add_argument("--out")
    x.add_argument("--force", action="store_true")
    x.set_defaults(func=cmd_export)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
