"""
Training loops for the parent network and its ensemble children

The parent trains once with SGD and a cosine decay. Snapshot children continue
from the parent under a cyclic schedule and are checkpointed at every cycle end.
Prune-and-tune children start from masked copies of the parent and are tuned
with a one-cycle schedule; they are independent jobs and may run in parallel.
"""

import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Callable, List, Optional, Tuple, Union

import numpy as np

from backend.engine.checkpoint import save_checkpoint
from backend.engine.layers import cross_entropy
from backend.engine.network import Network, build_network, forward
from backend.engine.optim import SGD
from backend.engine.tensor import Graph, backward
from backend.schedules import (CosineAnneal, OneCycle, SnapshotSchedule, cosine, one_cycle,
                               snapshot_cycle, snapshot_lr)
from backend.thread_pool_manager import JobFailedError, run_jobs

from .ensemble import ChildRecord, ChildSpec, EnsembleRun, Origin, evaluate
from .masks import PruneMask, antirandom_pair, apply_mask, prunable_shapes, random_mask

if TYPE_CHECKING:
    from backend.pipeline.dataset import Dataset

logger = logging.getLogger(__name__)

StepSchedule = Callable[[int], Tuple[float, float]]


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss stops being finite"""

    def __init__(self, label: str, epoch: int, step: int, loss: float):
        self.label = label
        self.epoch = epoch
        self.step = step
        super().__init__(f"{label}: loss became {loss} at epoch {epoch}, step {step}; "
                         f"lower the learning rate or enable gradient clipping")


@dataclass
class ParentConfig:
    architecture: str = "desk"
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.1
    final_lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 5.0
    augment: bool = True
    seed: int = 0

    def validate(self):
        _require(self.epochs >= 1, "epochs must be >= 1")
        _check_common(self.batch_size, self.grad_clip, self.weight_decay)
        _require(self.lr > 0 and self.final_lr > 0, "learning rates must be positive")
        _require(0.0 <= self.momentum < 1.0, "momentum must lie in [0, 1)")


@dataclass
class SnapshotConfig:
    cycles: int = 2
    epochs_per_cycle: int = 10
    peak_lr: float = 0.1
    floor_lr: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 64
    weight_decay: float = 5e-4
    grad_clip: float = 5.0
    augment: bool = True
    seed: int = 1

    def validate(self):
        _require(self.cycles >= 1, "cycles must be >= 1")
        _require(self.epochs_per_cycle >= 1, "epochs_per_cycle must be >= 1")
        _require(self.peak_lr > 0 and self.floor_lr > 0, "learning rates must be positive")
        _require(0.0 <= self.momentum < 1.0, "momentum must lie in [0, 1)")
        _check_common(self.batch_size, self.grad_clip, self.weight_decay)


@dataclass
class PruneTuneConfig:
    pairs: int = 1
    epochs: int = 10
    eta_max: float = 0.1
    eta_min: float = 1e-5
    mu_min: float = 0.85
    mu_max: float = 0.95
    split: float = 0.5
    sampling: str = "antirandom"
    sparsity: float = 0.5
    batch_size: int = 64
    weight_decay: float = 5e-4
    grad_clip: float = 5.0
    augment: bool = True
    seed: int = 2

    def validate(self):
        _require(self.pairs >= 1, "pairs must be >= 1")
        _require(self.epochs >= 0, "epochs must be >= 0")
        _require(self.sampling in ("antirandom", "random"),
                 f"sampling must be 'antirandom' or 'random', got {self.sampling!r}")
        _require(0.0 < self.sparsity < 1.0, "sparsity must lie in (0, 1)")
        _check_common(self.batch_size, self.grad_clip, self.weight_decay)
        # building the descriptor validates the learning-rate and momentum bounds
        OneCycle(self.eta_min, self.eta_max, self.mu_min, self.mu_max, 2, self.split)


def _require(condition: bool, message: str):
    if not condition:
        raise ValueError(message)


def _check_common(batch_size: int, grad_clip: float, weight_decay: float):
    _require(batch_size >= 1, "batch_size must be >= 1")
    _require(grad_clip >= 0, "grad_clip must be >= 0 (0 disables clipping)")
    _require(weight_decay >= 0, "weight_decay must be >= 0")


def steps_per_epoch(num_samples: int, batch_size: int) -> int:
    return max(1, -(-num_samples // batch_size))


def augment_batch(x: np.ndarray, rng: np.random.Generator, max_shift: int = 2) -> np.ndarray:
    """Random horizontal flip and an integer shift of up to `max_shift` pixels with reflect padding"""
    out = np.empty_like(x)
    height, width = x.shape[2], x.shape[3]
    padded = np.pad(x, ((0, 0), (0, 0), (max_shift, max_shift), (max_shift, max_shift)),
                    mode="reflect")
    flips = rng.random(len(x)) < 0.5
    shifts = rng.integers(-max_shift, max_shift + 1, size=(len(x), 2))
    for i in range(len(x)):
        dy, dx = shifts[i]
        crop = padded[i, :, max_shift + dy:max_shift + dy + height,
                      max_shift + dx:max_shift + dx + width]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def clip_gradients(grads, max_norm: float) -> float:
    """Scale gradients in place to a global L2 norm of at most `max_norm`; returns the raw norm"""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def train_steps(net: Network, data: "Dataset", epochs: int, batch_size: int,
                schedule: StepSchedule, rng: np.random.Generator, *,
                weight_decay: float = 0.0, grad_clip: float = 0.0, augment: bool = False,
                label: str = "train",
                on_step: Optional[Callable[[int, Network], None]] = None) -> Network:
    """Mini-batch SGD over `epochs`; `schedule(step)` returns (lr, momentum) for each global step"""
    optimizer = SGD(net, weight_decay=weight_decay)
    per_epoch = steps_per_epoch(len(data.x_train), batch_size)
    step = 0
    for epoch in range(1, epochs + 1):
        started = time.time()
        order = rng.permutation(len(data.x_train))
        total_loss, correct = 0.0, 0
        for batch in range(per_epoch):
            index = order[batch * batch_size:(batch + 1) * batch_size]
            xb, yb = data.x_train[index], data.y_train[index]
            if augment:
                xb = augment_batch(xb, rng)
            graph = Graph()
            logits = forward(net, xb, graph=graph)
            loss = cross_entropy(logits, yb, graph=graph)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(label, epoch, step, value)
            grads, _ = backward(graph, np.array(1.0))
            clip_gradients(grads, grad_clip)
            lr, momentum = schedule(step)
            logger.debug(f"{label} step {step}: lr={lr:.6g} momentum={momentum:.4f} loss={value:.4f}")
            optimizer.step(grads, lr, momentum)
            total_loss += value * len(index)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
            step += 1
            if on_step is not None:
                on_step(step, net)
        seen = len(data.x_train)
        logger.info(f"{label} epoch {epoch}/{epochs}: loss={total_loss / seen:.4f} "
                    f"acc={correct / seen:.4f} lr={lr:.3g} ({time.time() - started:.1f}s)")
    return net


def train_parent(data: "Dataset", config: ParentConfig) -> Network:
    """Train the shared parent from a seeded He-normal initialisation"""
    config.validate()
    net = build_network(config.architecture, in_channels=data.channels,
                        num_classes=data.num_classes, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    total = config.epochs * steps_per_epoch(len(data.x_train), config.batch_size)
    decay = CosineAnneal(config.lr, config.final_lr, max(total - 1, 1))

    def schedule(step: int) -> Tuple[float, float]:
        return cosine(decay, min(step, decay.t_max)), config.momentum

    logger.info(f"Training parent ({config.architecture}, {net.num_parameters()} parameters, "
                f"{config.epochs} epochs, {total} steps)")
    train_steps(net, data, config.epochs, config.batch_size, schedule, rng,
                weight_decay=config.weight_decay, grad_clip=config.grad_clip,
                augment=config.augment, label="parent")
    return net


def _val_accuracy(net: Network, data: "Dataset") -> float:
    return evaluate(net, data.x_val, data.y_val)["accuracy"]


def snapshot_children(parent: Network, data: "Dataset", config: SnapshotConfig,
                      out_dir: Union[str, Path], parent_checkpoint: Optional[str] = None
                      ) -> EnsembleRun:
    """Continue training a clone of the parent cyclically, checkpointing at each cycle end"""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_epoch = steps_per_epoch(len(data.x_train), config.batch_size)
    total = config.cycles * config.epochs_per_cycle * per_epoch
    plan = SnapshotSchedule(T=total, M=config.cycles, peak=config.peak_lr, floor=config.floor_lr)
    schedule_record = {"kind": "snapshot", **asdict(plan), "momentum": config.momentum}
    parent_checkpoint = parent_checkpoint or _save_parent(parent, out_dir)
    run = EnsembleRun(method="snapshot", parent_checkpoint=parent_checkpoint,
                      metadata={"config": asdict(config), "steps_per_epoch": per_epoch})

    def schedule(step: int) -> Tuple[float, float]:
        return snapshot_lr(plan, step + 1), config.momentum

    def on_step(step: int, net: Network):
        is_last = step == total or snapshot_cycle(plan, step + 1) != snapshot_cycle(plan, step)
        if not is_last:
            return
        cycle = snapshot_cycle(plan, step)
        name = f"snapshot_{cycle}"
        spec = ChildSpec(Origin.SNAPSHOT, seed=config.seed, schedule=schedule_record,
                         epochs=(cycle + 1) * config.epochs_per_cycle)
        path = out_dir / f"{name}.ediv"
        save_checkpoint(net, path, {"child": name, **spec.to_dict()})
        run.children.append(ChildRecord(name=name, checkpoint=str(path), spec=spec.to_dict(),
                                        val_accuracy=_val_accuracy(net, data)))
        logger.info(f"Snapshot cycle {cycle + 1}/{config.cycles} saved to {path}")

    child = parent.clone()
    rng = np.random.default_rng(config.seed)
    train_steps(child, data, config.cycles * config.epochs_per_cycle, config.batch_size,
                schedule, rng, weight_decay=config.weight_decay, grad_clip=config.grad_clip,
                augment=config.augment, label="snapshot", on_step=on_step)
    run.save_manifest(out_dir / "manifest.json")
    return run


def draw_masks(parent: Network, config: PruneTuneConfig) -> List[PruneMask]:
    """2N masks: N anti-random pairs, or 2N independent random masks"""
    shapes = prunable_shapes(parent)
    masks: List[PruneMask] = []
    for pair in range(config.pairs):
        seed = config.seed * 1000 + pair
        if config.sampling == "antirandom":
            masks.extend(antirandom_pair(shapes, seed))
        else:
            masks.append(random_mask(shapes, config.sparsity, seed * 2))
            masks.append(random_mask(shapes, config.sparsity, seed * 2 + 1))
    return masks


def tune_child(parent: Network, mask: PruneMask, data: "Dataset", config: PruneTuneConfig,
               seed: int, label: str) -> Network:
    """Mask a clone of the parent and tune it with a one-cycle schedule"""
    child = apply_mask(parent, mask)
    if config.epochs == 0:
        return child
    total = config.epochs * steps_per_epoch(len(data.x_train), config.batch_size)
    if total < 2:
        raise ValueError(f"{label}: one-cycle tuning needs at least 2 steps, got {total}")
    plan = OneCycle(config.eta_min, config.eta_max, config.mu_min, config.mu_max,
                    t_total=total - 1, split=config.split)

    def schedule(step: int) -> Tuple[float, float]:
        return one_cycle(plan, step)

    train_steps(child, data, config.epochs, config.batch_size, schedule,
                np.random.default_rng(seed), weight_decay=config.weight_decay,
                grad_clip=config.grad_clip, augment=config.augment, label=label)
    return child


def prune_tune_children(parent: Network, data: "Dataset", config: PruneTuneConfig,
                        out_dir: Union[str, Path], workers: int = 1,
                        parent_checkpoint: Optional[str] = None) -> EnsembleRun:
    """Build 2N masked children of the parent and tune each one independently"""
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    masks = draw_masks(parent, config)
    parent_checkpoint = parent_checkpoint or _save_parent(parent, out_dir)
    jobs = []
    for index, mask in enumerate(masks):
        name = f"prune_tune_{index}"
        jobs.append((name, (parent, mask, data, config, config.seed * 1000 + 500 + index, name)))

    logger.info(f"Tuning {len(jobs)} prune-and-tune children ({config.sampling} masks, "
                f"{config.epochs} epochs, workers={workers})")
    try:
        children = run_jobs(tune_child, jobs, workers=workers)
    except JobFailedError as e:
        for error in e.exceptions.values():
            if isinstance(error, TrainingDivergedError):
                raise error from e
        raise

    schedule_record = {"kind": "one_cycle", "eta_min": config.eta_min, "eta_max": config.eta_max,
                       "mu_min": config.mu_min, "mu_max": config.mu_max, "split": config.split}
    run = EnsembleRun(method="prune_tune", parent_checkpoint=parent_checkpoint,
                      metadata={"config": asdict(config)})
    for (name, args), mask, child in zip(jobs, masks, children):
        spec = ChildSpec(Origin.PRUNE_AND_TUNE, seed=args[4], schedule=schedule_record,
                         mask=mask, epochs=config.epochs)
        path = out_dir / f"{name}.ediv"
        save_checkpoint(child, path, {"child": name, **spec.to_dict()})
        run.children.append(ChildRecord(name=name, checkpoint=str(path), spec=spec.to_dict(),
                                        val_accuracy=_val_accuracy(child, data)))
    run.save_manifest(out_dir / "manifest.json")
    return run


def _save_parent(parent: Network, out_dir: Path) -> str:
    path = out_dir / "parent.ediv"
    save_checkpoint(parent, path, {"child": "parent"})
    return str(path)
