"""Desk-scale experiment drivers: zero-shot evaluation of an encoder and the
schedule-mode ablation."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import PatchEncoder, load_teacher
from .data import CORRESPONDENCE_LANDMARKS, PhantomSpec, phantom_dataset
from .trainer import SCHEDULE_MODES, TrainConfig, train
from .zeroshot import correspondence, dna_accuracy

ABLATION_LABELS = {
    "single:extrap": "Extrapolation",
    "single:shuffle": "Order correction",
    "single:compdecomp": "Comp-decomp",
    "direct_sum": "All (directly)",
    "cyclic": "All (cyclic training)",
}
ABLATION_ORDER = ("single:extrap", "single:shuffle", "single:compdecomp", "direct_sum", "cyclic")


@dataclass
class EvalSettings:
    dna_images: int = 200
    dna_trials_per_image: int = 10
    corr_pairs: int = 50
    stride: int = 8
    eval_seed: int = 777


def phantom_eval_set(config: TrainConfig, settings: EvalSettings):
    """Held-out phantoms (disjoint patient seeds from training)."""
    n = max(settings.dna_images, 2 * settings.corr_pairs)
    return phantom_dataset(PhantomSpec(image_pixels=config.image_pixels), n, seed=settings.eval_seed)


def evaluate_encoder(encoder, eval_set, settings: EvalSettings, n_cells: int) -> dict:
    images = dict(eval_set.items)
    ids = eval_set.ids
    dna = dna_accuracy(
        encoder, [images[i] for i in ids[: settings.dna_images]], settings.dna_trials_per_image, seed=settings.eval_seed
    )
    half = settings.corr_pairs
    pairs = list(zip(ids[:half], ids[half : 2 * half]))
    corr = correspondence(
        encoder, images, eval_set.landmarks_by_image(), pairs, CORRESPONDENCE_LANDMARKS, settings.stride, n_cells
    )
    return {
        "dna_accuracy": dna.accuracy,
        "dna_ci_low": dna.ci_low,
        "dna_ci_high": dna.ci_high,
        "dna_trials": dna.n_trials,
        "corr_error": corr.mean,
        "corr_std": corr.std,
    }


def untrained_encoder(config: TrainConfig) -> PatchEncoder:
    """The student's initialization for ``config.seed`` (the trainer seeds torch the same way)."""
    torch.manual_seed(config.seed)
    return PatchEncoder(config.encoder).eval()


RUN_FIELDS = ["seed", "mode", "dna_accuracy", "dna_ci_low", "dna_ci_high", "dna_trials", "corr_error", "corr_std"]


def run_ablation(
    config: TrainConfig,
    out_dir: str | Path,
    seeds=(0,),
    settings: EvalSettings = EvalSettings(),
    modes=ABLATION_ORDER,
) -> tuple[list[dict], list[dict]]:
    """Train every schedule mode for every seed on the same phantoms and evaluate.

    Returns ``(runs, reference)``: one row per (seed, mode), and one untrained-encoder
    row per seed. Within a seed all modes share seed, data and initialization.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set = phantom_dataset(PhantomSpec(image_pixels=config.image_pixels), config.phantom_images, config.phantom_seed)
    eval_set = phantom_eval_set(config, settings)
    runs, reference = [], []
    for seed in seeds:
        base = dataclasses.replace(config, seed=seed)
        reference.append({"seed": seed, "mode": "untrained", **evaluate_encoder(untrained_encoder(base), eval_set, settings, config.n1)})
        for mode in modes:
            if mode not in SCHEDULE_MODES:
                raise ValueError(f"unknown schedule mode {mode!r}")
            cfg = dataclasses.replace(base, schedule_mode=mode)
            run_dir = out_dir / f"seed{seed}" / mode.replace(":", "_")
            ckpt = run_dir / f"ckpt_epoch{cfg.epochs}.bin"
            if not ckpt.exists():
                ckpt = train(cfg, train_set, run_dir)
            runs.append({"seed": seed, "mode": mode, **evaluate_encoder(load_teacher(ckpt), eval_set, settings, cfg.n1)})
    write_rows(out_dir / "ablation_runs.csv", runs + reference, RUN_FIELDS)
    return runs, reference


def summarize_ablation(runs: list[dict]) -> list[dict]:
    """Mean over seeds per mode, in table order."""
    table = []
    for mode in ABLATION_ORDER:
        rows = [r for r in runs if r["mode"] == mode]
        if not rows:
            continue
        table.append(
            {
                "perspective": ABLATION_LABELS[mode],
                "mode": mode,
                "seeds": len(rows),
                "dna_test": 100 * float(np.mean([r["dna_accuracy"] for r in rows])),
                "corr_error": float(np.mean([r["corr_error"] for r in rows])),
            }
        )
    return table


def write_rows(path, rows: list[dict], fields: list[str]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


def ablation_markdown(table: list[dict]) -> str:
    lines = [
        "| Learning perspective | Combination manner | DNA-test (%) | Corr-error (px) |",
        "|---|---|---|---|",
    ]
    for row in table:
        manner = {"direct_sum": "Directly", "cyclic": "Cyclic training"}.get(row["mode"], "-")
        name = "All" if row["mode"] in ("direct_sum", "cyclic") else row["perspective"]
        lines.append(f"| {name} | {manner} | {row['dna_test']:.2f} | {row['corr_error']:.2f} |")
    return "\n".join(lines) + "\n"
