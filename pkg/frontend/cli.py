"""
Command handlers
Each handler takes the parsed argparse namespace and returns a process exit code.
main.py builds the argument tree and maps exceptions onto exit codes.
"""

import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from backend.diversity_metrics import PredictionSet, diversity_rows, read_labels, read_predictions
from backend.engine.checkpoint import load_checkpoint, save_checkpoint
from backend.engine.network import Network
from backend.ensembles.ensemble import evaluate
from backend.ensembles.trainer import (prune_tune_children, snapshot_children, steps_per_epoch,
                                       train_parent)
from backend.hashing.image_ops import RasterImage, grayscale, load_raster, save_png
from backend.hashing.perceptual_hash import PerceptualHash, hamming, hash_file
from backend.interpret.fourier import dataset_color_matrix, validate_color_matrix
from backend.interpret.saliency import (SaliencyConfig, heatmap_gray, heatmap_rgb, saliency,
                                       smoothgrad)
from backend.interpret.visualization import VizObjective, contact_sheet, visualize, visualize_layer
from backend.pipeline.config import ExperimentConfig, config_from_dict, load_config
from backend.pipeline.dataset import gen_dataset
from backend.pipeline.report import load_report, report_render, write_rows
from backend.pipeline.runner import raster_from_image, run_experiment
from backend.schedules import (CosineAnneal, OneCycle, SnapshotSchedule, plot_table,
                               schedule_table, table_to_csv)

logger = logging.getLogger(__name__)


def _config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return config_from_dict({})


def _write_text(text: str, out: Optional[str]):
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        logger.info(f"Wrote {path}")
    else:
        sys.stdout.write(text)


# forge


def cmd_forge_train_parent(args) -> int:
    config = _config(args)
    data = gen_dataset(config.dataset)
    parent = train_parent(data, config.parent)
    metrics = evaluate(parent, data.x_val, data.y_val)
    path = save_checkpoint(parent, Path(args.out) / "parent.ediv",
                           {"child": "parent", "seed": config.parent.seed, "val": metrics})
    print(f"{path} accuracy={metrics['accuracy']:.4f} nll={metrics['nll']:.4f} "
          f"ece={metrics['ece']:.4f}")
    return 0


def _load_parent(args) -> Network:
    parent, _ = load_checkpoint(args.parent)
    return parent


def cmd_forge_snapshot(args) -> int:
    config = _config(args)
    data = gen_dataset(config.dataset)
    run = snapshot_children(_load_parent(args), data, config.snapshot, args.out,
                            parent_checkpoint=str(args.parent))
    for child in run.children:
        print(f"{child.checkpoint} val_accuracy={child.val_accuracy:.4f}")
    return 0


def cmd_forge_prune_tune(args) -> int:
    config = _config(args)
    data = gen_dataset(config.dataset)
    workers = args.workers if args.workers is not None else config.resolved_workers()
    run = prune_tune_children(_load_parent(args), data, config.prune_tune, args.out,
                              workers=workers, parent_checkpoint=str(args.parent))
    for child in run.children:
        print(f"{child.checkpoint} val_accuracy={child.val_accuracy:.4f}")
    return 0


# schedule


def _default_steps(config: ExperimentConfig, epochs: int, batch_size: int) -> int:
    dataset = config.dataset
    if dataset.kind != "synthetic":
        raise ValueError("--steps is required for IDX datasets")
    return epochs * steps_per_epoch(dataset.train_per_class * dataset.num_classes, batch_size)


def cmd_schedule_dump(args) -> int:
    config = _config(args)
    if args.kind == "cosine":
        block = config.parent
        steps = args.steps or _default_steps(config, block.epochs, block.batch_size)
        schedule = CosineAnneal(block.lr, block.final_lr, max(steps - 1, 1))
        rows = schedule_table(schedule, momentum=block.momentum)
    elif args.kind == "one-cycle":
        block = config.prune_tune
        steps = args.steps or _default_steps(config, block.epochs, block.batch_size)
        schedule = OneCycle(block.eta_min, block.eta_max, block.mu_min, block.mu_max,
                            t_total=steps - 1, split=block.split)
        rows = schedule_table(schedule)
    else:
        block = config.snapshot
        steps = args.steps or _default_steps(config, block.cycles * block.epochs_per_cycle,
                                             block.batch_size)
        schedule = SnapshotSchedule(T=steps, M=block.cycles, peak=block.peak_lr,
                                    floor=block.floor_lr)
        rows = schedule_table(schedule, momentum=block.momentum)
    _write_text(table_to_csv(rows), args.out)
    if args.plot:
        plot_table(rows, args.plot, title=args.kind)
    return 0


# metrics


def cmd_metrics_report(args) -> int:
    labels = read_labels(args.labels) if args.labels else None
    methods = args.method or [Path(p).stem for p in args.predictions]
    if len(methods) != len(args.predictions):
        raise ValueError(f"Got {len(methods)} method names for {len(args.predictions)} "
                         f"prediction files")
    rows = []
    for method, path in zip(methods, args.predictions):
        rows.extend(diversity_rows(method, PredictionSet(read_predictions(path), labels)))
    if args.out:
        write_rows(rows, args.out)
        logger.info(f"Wrote {len(rows)} rows to {args.out}")
    for row in rows:
        print(f"{row.method:<16} {row.metric:<22} {row.mean:.6f} +/- {row.stderr:.6f} (n={row.n})")
    return 0


# lens


def _layer_index(net: Network, layer: str) -> int:
    return net.final_conv_index() if layer == "final" else int(layer)


def _color_matrix(config: ExperimentConfig, net: Network) -> np.ndarray:
    if config.color_matrix == "dataset":
        return dataset_color_matrix(gen_dataset(config.dataset).x_train)
    if config.color_matrix == "identity":
        return np.eye(net.input_channels)
    return validate_color_matrix(config.color_matrix, net.input_channels)


def cmd_lens_visualize(args) -> int:
    config = _config(args)
    net, _ = load_checkpoint(args.checkpoint)
    viz = config.viz
    if args.steps is not None:
        viz = replace(viz, steps=args.steps)
    if args.seed is not None:
        viz = replace(viz, seed=args.seed)
    matrix = _color_matrix(config, net)
    layer = _layer_index(net, args.layer)
    out = Path(args.out)
    workers = args.workers if args.workers is not None else config.resolved_workers()

    if args.grid:
        results = visualize_layer(net, layer, None, viz, color_matrix=matrix, workers=workers)
    else:
        if args.channel is None:
            raise ValueError("--channel is required unless --grid is given")
        results = [visualize(net, VizObjective(layer, args.channel), viz, color_matrix=matrix)]
    for result in results:
        path = save_png(raster_from_image(result.image),
                        out / f"{result.objective.layer}_{result.objective.channel}.png")
        print(f"{path} objective {result.initial_objective:.4f} -> {result.final_objective:.4f}")
    if args.grid:
        sheet = contact_sheet([r.image for r in results], columns=viz.columns)
        print(save_png(raster_from_image(sheet), out / f"{layer}_sheet.png"))
    return 0


def _image_for(net: Network, path: str) -> np.ndarray:
    raster = load_raster(path)
    if net.input_channels == 1 and raster.channels == 3:
        raster = grayscale(raster)
    pixels = raster.pixels / raster.max_value
    if net.input_channels == 3 and raster.channels == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return pixels.transpose(2, 0, 1)


def cmd_lens_saliency(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    image = _image_for(net, args.image)
    if args.smooth:
        config = SaliencyConfig(samples=args.samples, sigma=args.sigma, seed=args.seed)
        heat = smoothgrad(net, image, config)
    else:
        heat = saliency(net, image)
    out = Path(args.out)
    print(save_png(heatmap_rgb(heat), out))
    if args.gray:
        print(save_png(RasterImage(heatmap_gray(heat)), out.with_name(f"{out.stem}_gray.png")))
    return 0


# hash


def cmd_hash_compute(args) -> int:
    for path in args.files:
        print(f"{hash_file(path, args.algo).hex} {path}")
    return 0


def cmd_hash_dist(args) -> int:
    print(hamming(PerceptualHash.from_hex(args.hash_a), PerceptualHash.from_hex(args.hash_b)))
    return 0


# pipeline


def cmd_pipeline_run(args) -> int:
    config = load_config(args.config)
    report = run_experiment(config, output_dir=args.out, workers=args.workers)
    for row in report.rows:
        print(f"{row.method:<12} {row.metric:<20} {row.mean:.4f} +/- {row.stderr:.4f}")
    return 0


def cmd_pipeline_report(args) -> int:
    report = load_report(args.run_dir)
    written = report_render(report, args.run_dir, figure=not args.no_figure)
    for path in written.values():
        print(path)
    return 0


HANDLERS = {
    ("forge", "train-parent"): cmd_forge_train_parent,
    ("forge", "snapshot"): cmd_forge_snapshot,
    ("forge", "prune-tune"): cmd_forge_prune_tune,
    ("schedule", "dump"): cmd_schedule_dump,
    ("metrics", "report"): cmd_metrics_report,
    ("lens", "visualize"): cmd_lens_visualize,
    ("lens", "saliency"): cmd_lens_saliency,
    ("hash", "compute"): cmd_hash_compute,
    ("hash", "dist"): cmd_hash_dist,
    ("pipeline", "run"): cmd_pipeline_run,
    ("pipeline", "report"): cmd_pipeline_report,
}


def dispatch(args) -> int:
    return HANDLERS[(args.group, args.command)](args)

