"""
Experiment runner
Trains a parent, derives snapshot and prune-and-tune children from it,
visualises and hashes every final-layer channel, compares saliency maps and
output diversity, and writes the report. Every stage is journalled and a
failing stage leaves the artifacts written so far in place.
"""

import logging
import time
from contextlib import contextmanager
from datetime import datetime
from itertools import combinations
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from backend.diversity_metrics import (MetricRow, PredictionSet, diversity_rows, mean_stderr,
                                       write_predictions)
from backend.engine.checkpoint import save_checkpoint
from backend.engine.network import Network
from backend.ensembles.ensemble import EnsembleRun, evaluate, member_predictions
from backend.ensembles.trainer import prune_tune_children, snapshot_children, train_parent
from backend.hashing.image_ops import RasterImage, save_png
from backend.hashing.perceptual_hash import (ALGORITHMS, GRAYSCALE_ALGORITHMS, PerceptualHash,
                                             hamming, hash_image)
from backend.interpret.fourier import dataset_color_matrix, validate_color_matrix
from backend.interpret.saliency import heatmap_gray, heatmap_rgb, rmse, smoothgrad_batch
from backend.interpret.visualization import (VizResult, contact_sheet, random_neurons, visualize,
                                             visualize_layer)
from backend.thread_pool_manager import run_jobs

from .config import ExperimentConfig, parse_channels, save_config
from .dataset import Dataset, gen_dataset
from .report import DiversityReport, report_render
from .run_journal import JournalEventType, RunJournal

logger = logging.getLogger(__name__)

METHODS = ("snapshot", "prune_tune")


class StageError(RuntimeError):
    """A pipeline stage failed; artifacts written before the failure are kept"""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"Stage '{stage}' failed: {type(cause).__name__}: {cause}")


def raster_from_image(image: np.ndarray) -> RasterImage:
    """Quantise a (C, H, W) [0, 1] image to the 8-bit raster that is written to disk"""
    return RasterImage(RasterImage.from_chw(image).to_uint8())


def hash_distance_table(images_by_child: Sequence[Sequence[RasterImage]],
                        algorithms: Sequence[str], workers: int = 1) -> Dict[str, List[float]]:
    """Per item, the mean pairwise Hamming distance between children, for each algorithm

    images_by_child[k][i] is child k's image for item i.
    """
    children = len(images_by_child)
    items = len(images_by_child[0])
    if children < 2:
        raise ValueError("Distances need at least two children")
    jobs = [((k, i), (images_by_child[k][i], algorithms))
            for k in range(children) for i in range(items)]
    hashes = dict(zip([job_id for job_id, _ in jobs], run_jobs(_hash_all, jobs, workers=workers)))
    table: Dict[str, List[float]] = {}
    for algorithm in algorithms:
        per_item = []
        for i in range(items):
            pairs = [hamming(hashes[(a, i)][algorithm], hashes[(b, i)][algorithm])
                     for a, b in combinations(range(children), 2)]
            per_item.append(float(np.mean(pairs)))
        table[algorithm] = per_item
    return table


def resolve_color_matrix(setting, images: np.ndarray) -> np.ndarray:
    """"dataset", "identity" or an explicit matrix, checked against the image channel count"""
    channels = images.shape[1]
    if setting == "dataset":
        return dataset_color_matrix(images)
    if setting == "identity":
        return np.eye(channels)
    return validate_color_matrix(setting, channels)


def _hash_all(image: RasterImage, algorithms: Sequence[str]) -> Dict[str, PerceptualHash]:
    return {algorithm: hash_image(image, algorithm) for algorithm in algorithms}


class ExperimentRunner:
    """Runs the configured experiment into one output directory"""

    def __init__(self, config: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None,
                 workers: Optional[int] = None):
        self.config = config
        self.out = Path(output_dir or config.output_dir)
        self.workers = workers if workers is not None else config.resolved_workers()
        self.journal = RunJournal(self.out)
        self.timestamps: Dict[str, str] = {}
        self.data: Optional[Dataset] = None
        self.color_matrix: Optional[np.ndarray] = None
        self.parent: Optional[Network] = None
        self.parent_checkpoint = ""
        self.runs: Dict[str, EnsembleRun] = {}
        self.networks: Dict[str, List[Network]] = {}
        self.rows: List[MetricRow] = []
        self.channel_distances: Dict[str, Dict[str, List[float]]] = {}
        self.layer: Optional[int] = None
        self.channels: List[int] = []

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        started = time.time()
        self.timestamps[f"{name}_start"] = datetime.now().isoformat()
        self.journal.stage_start(name)
        logger.info(f"Stage {name}: started")
        try:
            yield
        except Exception as e:
            self.journal.stage_failed(name, f"{type(e).__name__}: {e}")
            logger.error(f"Stage {name} failed: {e}", exc_info=True)
            raise StageError(name, e) from e
        elapsed = time.time() - started
        self.timestamps[f"{name}_end"] = datetime.now().isoformat()
        self.journal.stage_end(name, seconds=round(elapsed, 3))
        logger.info(f"Stage {name}: done in {elapsed:.1f}s")

    def _artifact(self, stage: str, path: Path):
        self.journal.artifact(stage, path.relative_to(self.out))

    def run(self) -> DiversityReport:
        self.out.mkdir(parents=True, exist_ok=True)
        save_config(self.config, self.out / "config.yaml")
        self.journal.log_event(JournalEventType.CONFIG_LOADED, "",
                               {"digest": self.config.digest(), "workers": self.workers})
        logger.info(f"Running experiment into {self.out} with {self.workers} worker(s)")

        with self.stage("dataset"):
            self._dataset()
        with self.stage("parent"):
            self._parent()
        with self.stage("snapshot"):
            self._children("snapshot")
        with self.stage("prune_tune"):
            self._children("prune_tune")
        with self.stage("predictions"):
            self._predictions()
        with self.stage("visualization"):
            viz = self._visualization()
        with self.stage("hashing"):
            self._hashing(viz)
        with self.stage("saliency"):
            self._saliency()
        with self.stage("report"):
            report = self._report()
        self.journal.log_event(JournalEventType.RUN_COMPLETE, "", {"rows": len(report.rows)})
        return report

    # Stages

    def _dataset(self):
        self.data = gen_dataset(self.config.dataset)
        self.color_matrix = resolve_color_matrix(self.config.color_matrix, self.data.x_train)

    def _parent(self):
        self.parent = train_parent(self.data, self.config.parent)
        path = self.out / "checkpoints" / "parent.ediv"
        metrics = evaluate(self.parent, self.data.x_val, self.data.y_val)
        save_checkpoint(self.parent, path, {"child": "parent", "seed": self.config.parent.seed,
                                            "val": metrics})
        self.parent_checkpoint = str(path.relative_to(self.out))
        self._artifact("parent", path)
        for name, value in metrics.items():
            self.rows.append(MetricRow("parent", name, value, 0.0, len(self.data.y_val)))
        logger.info(f"Parent validation: {metrics}")

    def _children(self, method: str):
        out_dir = self.out / "checkpoints" / method
        parent_path = str(self.out / self.parent_checkpoint)
        if method == "snapshot":
            run = snapshot_children(self.parent, self.data, self.config.snapshot, out_dir,
                                    parent_checkpoint=parent_path)
        else:
            run = prune_tune_children(self.parent, self.data, self.config.prune_tune, out_dir,
                                      workers=self.workers, parent_checkpoint=parent_path)
        self.runs[method] = run
        self.networks[method] = run.load_children()
        self._artifact(method, out_dir / "manifest.json")

    def _predictions(self):
        for method in METHODS:
            probs = member_predictions(self.networks[method], self.data.x_val)
            path = write_predictions(probs, self.out / "predictions" / f"{method}.edpr")
            self._artifact("predictions", path)
            if probs.shape[0] < 2:
                logger.warning(f"{method}: a single child has no pairwise output diversity")
                continue
            self.rows.extend(diversity_rows(method, PredictionSet(probs, self.data.y_val)))

    def _viz_targets(self) -> Tuple[int, List[int]]:
        settings = self.config.viz
        layer = self.parent.final_conv_index() if settings.layer == "final" else int(settings.layer)
        if settings.channels == "all":
            channels = list(range(self.parent.layers[layer].out_channels))
        else:
            channels = parse_channels(settings.channels)
        return layer, channels

    def _visualization(self) -> Dict[str, List[VizResult]]:
        settings = self.config.viz
        self.layer, self.channels = self._viz_targets()
        subjects: Dict[str, Network] = {}
        if settings.include_parent:
            subjects["parent"] = self.parent
        for method in METHODS:
            for record, net in zip(self.runs[method].children, self.networks[method]):
                subjects[record.name] = net

        results: Dict[str, List[VizResult]] = {}
        for name, net in subjects.items():
            results[name] = visualize_layer(net, self.layer, self.channels, settings,
                                            color_matrix=self.color_matrix, workers=self.workers)
            folder = self.out / "viz" / name
            for result in results[name]:
                save_png(raster_from_image(result.image),
                         folder / f"{result.objective.layer}_{result.objective.channel}.png")
            sheet = contact_sheet([r.image for r in results[name]], columns=settings.columns)
            sheet_path = save_png(raster_from_image(sheet), folder / "sheet.png")
            self._artifact("visualization", sheet_path)
            improved = sum(r.improved for r in results[name])
            logger.info(f"{name}: objective improved on {improved}/{len(results[name])} channels")

        if settings.random_neurons:
            objectives = random_neurons(self.parent, settings.random_neurons, settings.seed)
            for name, net in subjects.items():
                jobs = [(o.label, (net, o, settings, self.color_matrix)) for o in objectives]
                picked = run_jobs(visualize, jobs, workers=self.workers)
                results[f"{name}/random"] = picked
                for result in picked:
                    save_png(raster_from_image(result.image),
                             self.out / "viz" / name / "random" / f"{result.objective.label}.png")
        return results

    def _hashing(self, viz: Dict[str, List[VizResult]]):
        for method in METHODS:
            names = [record.name for record in self.runs[method].children]
            if len(names) < 2:
                continue
            for suffix, prefix in (("", "viz_"), ("/random", "random_")):
                if f"{names[0]}{suffix}" not in viz:
                    continue
                images = [[raster_from_image(r.image) for r in viz[f"{name}{suffix}"]]
                          for name in names]
                table = hash_distance_table(images, ALGORITHMS, workers=self.workers)
                for algorithm in ALGORITHMS:
                    values = table[algorithm]
                    self.rows.append(MetricRow(method, f"{prefix}{algorithm}",
                                               *mean_stderr(values), n=len(values)))
                    if not suffix:
                        self.channel_distances.setdefault(method, {})[algorithm] = values

    def _saliency(self):
        settings = self.config.saliency
        count = min(settings.max_samples, len(self.data.x_val))
        images = self.data.x_val[:count]
        subjects: List[Tuple[str, Network]] = [("parent", self.parent)]
        for method in METHODS:
            subjects.extend((record.name, net) for record, net
                            in zip(self.runs[method].children, self.networks[method]))
        jobs = [(name, (net, images, settings)) for name, net in subjects]
        logger.info(f"SmoothGrad on {count} validation images for {len(jobs)} networks")
        maps = dict(zip([name for name, _ in subjects],
                        run_jobs(smoothgrad_batch, jobs, workers=self.workers)))

        for name, heat in maps.items():
            for i in range(min(settings.figures, count)):
                path = save_png(heatmap_rgb(heat[i]), self.out / "saliency" / name / f"{i}.png")
                self._artifact("saliency", path)

        for method in METHODS:
            names = [record.name for record in self.runs[method].children]
            if len(names) < 2:
                continue
            rmse_values = [float(np.mean([rmse(maps[a][i], maps[b][i])
                                          for a, b in combinations(names, 2)]))
                           for i in range(count)]
            self.rows.append(MetricRow(method, "saliency_rmse", *mean_stderr(rmse_values),
                                       n=count))
            rasters = [[RasterImage(heatmap_gray(maps[name][i])) for i in range(count)]
                       for name in names]
            table = hash_distance_table(rasters, GRAYSCALE_ALGORITHMS, workers=self.workers)
            for algorithm in GRAYSCALE_ALGORITHMS:
                self.rows.append(MetricRow(method, f"saliency_{algorithm}",
                                           *mean_stderr(table[algorithm]), n=count))

    def _report(self) -> DiversityReport:
        children = {
            method: [{"name": c.name, "val_accuracy": c.val_accuracy,
                      "checkpoint": str(Path(c.checkpoint).relative_to(self.out))}
                     for c in self.runs[method].children]
            for method in METHODS
        }
        provenance = {
            "config_digest": self.config.digest(),
            "dataset_digest": self.data.digest(),
            "seeds": self.config.seeds(),
            "parent_checkpoint": self.parent_checkpoint,
        }
        if self.config.record_timestamps:
            provenance["timestamps"] = dict(self.timestamps)
        report = DiversityReport(rows=self.rows, layer=self.layer, channels=len(self.channels),
                                 children=children, channel_distances=self.channel_distances,
                                 provenance=provenance)
        for path in report_render(report, self.out).values():
            self._artifact("report", path)
        return report


def run_experiment(config: ExperimentConfig, output_dir: Optional[Union[str, Path]] = None,
                   workers: Optional[int] = None) -> DiversityReport:
    return ExperimentRunner(config, output_dir, workers).run()
