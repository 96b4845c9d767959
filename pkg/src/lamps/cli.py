"""Command-line entry points.

Exit codes: 0 success, 1 runtime error, 2 configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import CheckpointError, load_checkpoint, load_teacher
from .data import (
    LOCALIZABILITY_LANDMARKS,
    LandmarkError,
    PhantomSpec,
    export_phantoms,
    ingest_folder,
    load_landmarks,
    load_pairs,
    phantom_dataset,
)
from .experiments import (
    RUN_FIELDS,
    EvalSettings,
    ablation_markdown,
    run_ablation,
    summarize_ablation,
    write_rows,
)
from .geometry import ConfigError
from .plotting import (
    plot_ablation,
    plot_correspondence,
    plot_dna_similarities,
    plot_landmark_errors,
    plot_loss_curves,
)
from .trainer import config_from_dict, dump_config, load_config, read_loss_log, train
from .zeroshot import correspondence, dna_accuracy, extract_local_embeddings

log = logging.getLogger("lamps")

OUT_ROOT_ENV = "LAMPS_OUT_ROOT"
PAPER_DNA_REFERENCE = 88.54
PAPER_CORR_REFERENCE = "68.17±44.45"
EVAL_PHANTOM_SEED = 777


class RunManifest:
    """Collects what a command produced; written atomically as ``manifest.json``."""

    def __init__(self, command: str, out_dir: Path, config: dict | None = None, seed: int | None = None):
        self.out_dir = out_dir
        self.record = {
            "command": command,
            "argv": sys.argv[1:],
            "config": config,
            "seed": seed,
            "version": __version__,
            "started": datetime.now(timezone.utc).isoformat(),
            "finished": None,
            "artifacts": [],
        }

    def add(self, *paths) -> None:
        self.record["artifacts"].extend(str(p) for p in paths)

    def write(self) -> Path:
        self.record["finished"] = datetime.now(timezone.utc).isoformat()
        path = self.out_dir / "manifest.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.record, indent=2, default=str))
        tmp.replace(path)
        return path


def _out_dir(arg: str | None, command: str) -> Path:
    if arg:
        path = Path(arg)
    else:
        root = Path(os.environ.get(OUT_ROOT_ENV, "runs"))
        path = root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _checkpoint_config(ckpt: str):
    return config_from_dict(load_checkpoint(ckpt)["trainer_state"]["config"])


def _load_eval_data(args, config, need_landmarks: bool):
    """Dataset at the checkpoint's grid resolution, with landmarks when available."""
    if args.data == "phantom":
        n = getattr(args, "images", None) or 100
        return phantom_dataset(PhantomSpec(image_pixels=config.image_pixels), n, seed=args.phantom_seed)
    dataset = ingest_folder(args.data, config.grid)
    if getattr(args, "landmarks", None):
        dataset.landmarks = load_landmarks(args.landmarks, dataset.source_sizes, config.image_pixels)
    elif need_landmarks:
        raise ConfigError("--landmarks is required with a folder dataset")
    return dataset


def cmd_pretrain(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args.out, "pretrain")
    manifest = RunManifest("pretrain", out, config.to_dict(), config.seed)
    if args.data == "phantom":
        dataset = phantom_dataset(PhantomSpec(image_pixels=config.image_pixels), config.phantom_images, config.phantom_seed)
    else:
        dataset = ingest_folder(args.data, config.grid, manifest=out / "ingest_manifest.txt")
        manifest.add(out / "ingest_manifest.txt")
    dump_config(config, out / "config.yaml")
    ckpt = train(config, dataset, out, resume=args.resume, progress=True)
    figure = plot_loss_curves(read_loss_log(out / "loss_log.csv"), out / "loss_curves.png")
    manifest.add(out / "config.yaml", out / "loss_log.csv", figure, *sorted(out.glob("ckpt_epoch*.bin")))
    manifest.write()
    print(f"final checkpoint: {ckpt}")
    return 0


def cmd_eval_dna(args) -> int:
    config = _checkpoint_config(args.ckpt)
    encoder = load_teacher(args.ckpt)
    if args.data == "phantom" and args.images is None:
        args.images = max(1, math.ceil(args.trials / 10))
    dataset = _load_eval_data(args, config, need_landmarks=False)
    per_image = max(1, math.ceil(args.trials / len(dataset)))
    images = [img for _, img in dataset.items]
    images = images[: math.ceil(args.trials / per_image)]
    result = dna_accuracy(encoder, images, per_image, seed=args.seed)
    out = _out_dir(args.out, "eval-dna")
    manifest = RunManifest("eval-dna", out, config.to_dict(), args.seed)
    trials_path = out / "dna_trials.csv"
    with open(trials_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "c1_top", "c1_left", "c1_side", "cs_top", "cs_left", "cs_side",
                         "cs_source", "predicted_source", "sim_c1", "sim_c", "correct"])
        for i, t in enumerate(result.trials):
            writer.writerow([i, *t.c1_window, *t.cs_window, t.cs_source, t.predicted_source,
                             repr(t.sim_c1), repr(t.sim_c), int(t.correct)])
    report = (
        f"dna_accuracy\t{result.accuracy:.4f}\n"
        f"ci95_low\t{result.ci_low:.4f}\n"
        f"ci95_high\t{result.ci_high:.4f}\n"
        f"trials\t{result.n_trials}\n"
        f"trials_inside_c1\t{result.n_inside_c1}\n"
        f"trials_inside_complement\t{result.n_trials - result.n_inside_c1}\n"
        f"# reference (paper scale, not reproduced here): {PAPER_DNA_REFERENCE}%\n"
    )
    report_path = out / "dna_report.txt"
    report_path.write_text(report)
    figure = plot_dna_similarities(result.trials, out / "dna_similarities.png")
    manifest.add(report_path, trials_path, figure)
    manifest.write()
    print(f"DNA-test accuracy: {result.summary()}")
    return 0


def cmd_eval_correspondence(args) -> int:
    config = _checkpoint_config(args.ckpt)
    encoder = load_teacher(args.ckpt)
    if args.data == "phantom" and args.images is None:
        args.images = 100
    dataset = _load_eval_data(args, config, need_landmarks=True)
    if args.pairs:
        pairs = load_pairs(args.pairs)
    else:
        ids = dataset.ids
        pairs = list(zip(ids[::2], ids[1::2]))
    landmarks = dataset.landmarks_by_image()
    images = dict(dataset.items)
    for q, k in pairs:
        for image_id in (q, k):
            if image_id not in images:
                raise ConfigError(f"pair references unknown image {image_id!r}")
    result = correspondence(encoder, images, landmarks, pairs, stride=args.stride, n_cells=config.n1)
    out = _out_dir(args.out, "eval-correspondence")
    manifest = RunManifest("eval-correspondence", out, config.to_dict(), None)
    per_landmark = result.per_landmark()
    table = out / "correspondence_landmarks.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["landmark_name", "mean_error_px", "std_error_px"])
        for name, (m, s) in per_landmark.items():
            writer.writerow([name, f"{m:.2f}", f"{s:.2f}"])
    preds = out / "correspondence_predictions.csv"
    with open(preds, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_id", "key_id", "landmark_name", "pred_x", "pred_y", "true_x", "true_y", "error_px"])
        for p, (q, k) in enumerate(pairs):
            for j, name in enumerate(result.landmark_names):
                writer.writerow([q, k, name, *map(int, result.predicted[p, j]), *map(int, result.truth[p, j]),
                                 f"{result.errors[p, j]:.3f}"])
    report = out / "correspondence_report.txt"
    report.write_text(
        f"pairs\t{len(pairs)}\nlandmarks\t{len(result.landmark_names)}\nstride\t{args.stride}\n"
        f"mean±std_px\t{result.summary()}\n"
        f"# reference (paper scale, 1024^2 images, not reproduced here): {PAPER_CORR_REFERENCE}\n"
    )
    q0, k0 = pairs[0]
    fig1 = plot_correspondence(images[k0], result.truth[0], result.predicted[0], result.landmark_names,
                               out / "correspondence_example.png")
    fig2 = plot_landmark_errors(per_landmark, out / "correspondence_errors.png")
    manifest.add(report, table, preds, fig1, fig2)
    manifest.write()
    print(f"correspondence error: {result.summary()} px over {len(pairs)} pairs")
    return 0


def cmd_extract_embeddings(args) -> int:
    config = _checkpoint_config(args.ckpt)
    encoder = load_teacher(args.ckpt)
    dataset = _load_eval_data(args, config, need_landmarks=True)
    vocabulary = set(args.vocabulary or LOCALIZABILITY_LANDMARKS)
    images = dict(dataset.items)
    rows = [a for a in dataset.landmarks if a.landmark_name in vocabulary]
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "landmark_name"] + [f"e{i}" for i in range(config.encoder.embed_dim)])
        for image_id in dict.fromkeys(a.image_id for a in rows):
            marks = [a for a in rows if a.image_id == image_id]
            feats = extract_local_embeddings(encoder, images[image_id], [(a.x, a.y) for a in marks], config.n1)
            for a, f in zip(marks, feats):
                writer.writerow([a.image_id, a.landmark_name, *(repr(float(v)) for v in f)])
    print(f"wrote {len(rows)} embeddings to {out_path}")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args.out, "ablate")
    manifest = RunManifest("ablate", out, config.to_dict(), config.seed)
    settings = EvalSettings(
        dna_images=args.dna_images, dna_trials_per_image=args.dna_trials_per_image,
        corr_pairs=args.pairs, stride=args.stride,
    )
    seeds = args.seeds if args.seeds else [config.seed]
    runs, reference = run_ablation(config, out, seeds, settings)
    table = summarize_ablation(runs)
    table_path = write_rows(out / "ablation.csv", table, ["perspective", "mode", "seeds", "dna_test", "corr_error"])
    ref_path = write_rows(out / "ablation_reference.csv", reference, RUN_FIELDS)
    md = out / "ablation.md"
    md.write_text(ablation_markdown(table))
    figure = plot_ablation(runs, out / "ablation.png")
    manifest.add(table_path, ref_path, md, out / "ablation_runs.csv", figure)
    manifest.write()
    print(md.read_text(), end="")
    return 0


def cmd_make_phantoms(args) -> int:
    out = export_phantoms(args.out, PhantomSpec(image_pixels=args.pixels), args.n, args.seed)
    print(f"wrote {args.n} phantoms to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lamps", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="cyclic student-teacher pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="image folder or 'phantom'")
    p.add_argument("--out")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_pretrain)

    def eval_data(p, default_images=None):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", default="phantom", help="image folder or 'phantom'")
        p.add_argument("--images", type=int, default=default_images, help="phantom image count")
        p.add_argument("--phantom-seed", type=int, default=EVAL_PHANTOM_SEED)

    p = sub.add_parser("eval-dna", help="part-whole DNA-test")
    eval_data(p)
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_dna)

    p = sub.add_parser("eval-correspondence", help="cross-patient landmark matching")
    eval_data(p)
    p.add_argument("--landmarks")
    p.add_argument("--pairs")
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_correspondence)

    p = sub.add_parser("extract-embeddings", help="labeled landmark embeddings for external projection")
    eval_data(p, default_images=100)
    p.add_argument("--landmarks")
    p.add_argument("--vocabulary", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_embeddings)

    p = sub.add_parser("ablate", help="five schedule regimes, then zero-shot evaluation")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--dna-images", type=int, default=200)
    p.add_argument("--dna-trials-per-image", type=int, default=10)
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--stride", type=int, default=8)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("make-phantoms", help="write phantom PNGs, landmarks.csv and pairs.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=EVAL_PHANTOM_SEED)
    p.add_argument("--pixels", type=int, default=144)
    p.set_defaults(func=cmd_make_phantoms)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, LandmarkError, CheckpointError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
