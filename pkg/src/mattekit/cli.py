"""Command-line entry points: train, infer, evaluate, bench, make-trimap, generate."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from mattekit.augment import perturb_background_for_test
from mattekit.bench import pin_threads, run_bench
from mattekit.configio import read_config_file
from mattekit.data import DirectoryDataset
from mattekit.image import (
    Image,
    composite,
    composite_arrays,
    read_image,
    read_matte,
    recover_foreground,
    resize_array,
    write_image,
    write_matte,
)
from mattekit.metrics import compute_metrics, make_trimap
from mattekit.model import load_model
from mattekit.synth import SynthSpec, write_dataset
from mattekit.trainer import load_train_setup, run_schedule

EVAL_COLUMNS = ("dataset", "sample", "sad", "mse", "grad", "conn",
                "fg_mse", "unknown_pixel_count")
MEAN_COLUMNS = ("sad", "mse", "grad", "conn", "fg_mse")


def model_predictor(model, k: int | None = None):
    """Wrap a model as the (image, background) -> prediction callable."""
    def predict(image: Image, background: Image):
        return model.infer(image, background, k=k)
    return predict


def evaluate_dataset(
    dataset,
    predict,
    name: str = "dataset",
    perturb: bool = True,
    seed: int = 0,
    trimap_lo: float = 0.06,
    trimap_hi: float = 0.96,
    trimap_iters: int = 10,
) -> tuple[list, dict]:
    """Composite every sample over every background and score the mattes.

    The model sees a perturbed copy of each background (subpixel shift,
    gamma, noise) while the composite itself uses the clean one, mimicking
    captured-background mismatch.  Returns (per-pair rows, metric means).
    """
    rows = []
    rng = np.random.default_rng(seed)
    sample_names = getattr(dataset, "sample_names", None)
    bg_names = getattr(dataset, "background_names", None)
    for i in range(dataset.n_samples):
        fg, alpha_star = dataset.sample(i)
        trimap = make_trimap(alpha_star, lo=trimap_lo, hi=trimap_hi,
                             iters=trimap_iters)
        for j in range(dataset.n_backgrounds):
            bg = dataset.background(j)
            if bg.shape[-2:] != fg.shape[-2:]:
                bg = np.clip(
                    resize_array(bg, fg.shape[-2], fg.shape[-1]), 0.0, 1.0
                )
            comp = Image(composite_arrays(alpha_star[None], fg, bg))
            model_bg = Image(bg)
            if perturb:
                model_bg = perturb_background_for_test(model_bg, rng)
            pred_alpha, pred_residual = predict(comp, model_bg)
            pred_fgr = recover_foreground(pred_residual, comp)
            report = compute_metrics(
                pred_alpha.data, alpha_star, pred_fgr.data, fg, trimap
            )
            si = sample_names[i] if sample_names else f"{i:04d}"
            bj = bg_names[j] if bg_names else f"bg{j:02d}"
            rows.append({
                "dataset": name, "sample": f"{si}+{bj}",
                "sad": report.sad, "mse": report.mse, "grad": report.grad,
                "conn": report.conn, "fg_mse": report.fg_mse,
                "unknown_pixel_count": report.unknown_pixels,
            })
    means = {
        key: float(np.mean([r[key] for r in rows])) for key in MEAN_COLUMNS
    }
    return rows, means


def write_eval_csv(path: str | Path, rows: list, means: dict, name: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        mean_row = dict(means, dataset=name, sample="mean")
        mean_row["unknown_pixel_count"] = ""
        writer.writerow(mean_row)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    setup = load_train_setup(args.config)
    state = run_schedule(
        setup.stages, setup.datasets, setup.seed,
        model_config=setup.model_config, aug_cfg=setup.augment,
        run_dir=args.out, dtype=setup.dtype, resume=args.resume,
    )
    if state.loss_history:
        last = state.loss_history[-1]
        print(f"finished {state.stage_index} stages, {last['step']} steps, "
              f"final total loss {last['total']:.6f}")
    else:
        print(f"finished {state.stage_index} stages, no steps taken")
    for event in state.events:
        print(f"note: stage {event['stage']} {event['event']}")
    print(f"run directory: {args.out}")
    return 0


def cmd_infer(args) -> int:
    model, _ = load_model(args.checkpoint)
    if args.c is not None and args.c != model.config.refine.c:
        raise ValueError(
            f"checkpoint was trained at c={model.config.refine.c}, "
            f"cannot run at c={args.c}"
        )
    image = read_image(args.image)
    background = read_image(args.background)
    alpha, residual = model.infer(image, background, k=args.k)
    foreground = recover_foreground(residual, image)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_matte(out_dir / "alpha.png", alpha)
    write_image(out_dir / "foreground.png", foreground)
    written = ["alpha.png", "foreground.png"]
    if args.new_background:
        nb = read_image(args.new_background)
        if nb.data.shape != image.data.shape:
            nb = Image(np.clip(
                resize_array(nb.data, image.height, image.width), 0.0, 1.0
            ))
        write_image(out_dir / "composite.png", composite(alpha, foreground, nb))
        written.append("composite.png")
    print(f"wrote {', '.join(written)} to {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = DirectoryDataset(args.data)
    model, _ = load_model(args.checkpoint)
    name = Path(args.data).name or "dataset"
    rows, means = evaluate_dataset(
        dataset, model_predictor(model, k=args.k), name=name,
        perturb=not args.no_perturb, seed=args.seed,
    )
    write_eval_csv(args.out, rows, means, name)
    summary = " ".join(f"{k}={means[k]:.4f}" for k in MEAN_COLUMNS)
    print(f"{len(rows)} pairs: {summary}")
    print(f"wrote {args.out}")
    return 0


def _parse_sizes(text: str) -> list[tuple[int, int]]:
    sizes = []
    for token in text.split(","):
        token = token.strip().lower()
        try:
            h, w = token.split("x")
            sizes.append((int(h), int(w)))
        except ValueError:
            raise ValueError(f"bad resolution {token!r}, expected HxW") from None
    return sizes


def _parse_budgets(text: str) -> list:
    budgets = []
    for token in text.split(","):
        token = token.strip().lower()
        budgets.append("full" if token == "full" else int(token))
    return budgets


def cmd_bench(args) -> int:
    model, _ = load_model(args.checkpoint)
    with pin_threads(args.threads):
        result = run_bench(
            model, _parse_sizes(args.resolutions), _parse_budgets(args.k),
            repeats=args.repeats, warmup=args.warmup, batch=args.batch,
        )
    text = result.to_csv()
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


def cmd_make_trimap(args) -> int:
    from PIL import Image as PILImage

    matte = read_matte(args.alpha)
    trimap = make_trimap(matte.data, lo=args.lo, hi=args.hi,
                         iters=args.iters, mode=args.mode)
    shades = np.array([0, 128, 255], dtype=np.uint8)
    PILImage.fromarray(shades[trimap.labels], mode="L").save(args.out)
    unknown = int(trimap.unknown.sum())
    print(f"wrote {args.out} ({unknown} unknown pixels)")
    return 0


def cmd_generate(args) -> int:
    if args.spec:
        flat = read_config_file(args.spec)
        kw = {
            key: tuple(value) if isinstance(value, list) else value
            for key, value in flat.items()
        }
        try:
            spec = SynthSpec(**kw)
        except TypeError as exc:
            raise ValueError(f"bad spec option: {exc}") from exc
    else:
        spec = SynthSpec()
    manifest = write_dataset(spec, args.count, args.out, base_seed=args.seed)
    print(f"wrote {manifest['count']} triples to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mattekit",
        description="Background matting: staged training, inference, "
                    "evaluation, and throughput measurement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a staged schedule from a config file")
    t.add_argument("--config", required=True, help="flat key=value config file")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", action="store_true",
                   help="continue from the run directory's checkpoints")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="matte one image given its clean background")
    i.add_argument("--image", required=True)
    i.add_argument("--background", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--new-background", default=None,
                   help="optional background to composite the result over")
    i.add_argument("--k", type=int, default=None,
                   help="override the refinement patch budget")
    i.add_argument("--c", type=int, default=None,
                   help="expected coarse scale; must match the checkpoint")
    i.add_argument("--out-dir", default=".")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset directory")
    e.add_argument("--data", required=True, help="directory with fgr/ pha/ bgr/")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True, help="CSV output path")
    e.add_argument("--k", type=int, default=None)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--no-perturb", action="store_true",
                   help="hand the model the clean background")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="median pass-through time vs patch budget")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--resolutions", default="256x256")
    b.add_argument("--k", default="0,64,256,full")
    b.add_argument("--repeats", type=int, default=50)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--out", default=None, help="CSV path (default: stdout)")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("make-trimap", help="derive a trimap PNG from a matte")
    m.add_argument("--alpha", required=True)
    m.add_argument("--lo", type=float, default=0.06)
    m.add_argument("--hi", type=float, default=0.96)
    m.add_argument("--iters", type=int, default=10)
    m.add_argument("--mode", default="erode-certainty",
                   choices=("erode-certainty", "close-band"))
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_trimap)

    g = sub.add_parser("generate", help="write a synthetic fgr/pha/bgr dataset")
    g.add_argument("--spec", default=None, help="flat key=value spec file")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
