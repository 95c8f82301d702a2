"""
Training loop: seeded mini-batch RMSProp with on-the-fly augmentation.
"""

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import structlog

from ..config.settings import AugmentationConfig
from .checkpoint import Checkpoint, save_checkpoint
from .datasets import Dataset, FeatureNormalization
from .errors import NonFiniteError, ShapeMismatchError, TrainingDivergedError
from .network import Network, RMSPropState, rmsprop_step

logger = structlog.get_logger(__name__)

REPORT_HEADER = ["epoch", "train_loss", "train_acc", "val_acc"]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: Optional[float]
    wall_time: float


@dataclass
class TrainReport:
    seed: int
    config_hash: str
    epochs_configured: int
    epochs: List[EpochRecord] = field(default_factory=list)
    early_stopped: bool = False
    validation_available: bool = True
    normalization: Optional[FeatureNormalization] = None
    checkpoints: Dict[int, Checkpoint] = field(default_factory=dict, repr=False)
    checkpoint_paths: List[Path] = field(default_factory=list)

    @property
    def final_val_accuracy(self) -> Optional[float]:
        return self.epochs[-1].val_accuracy if self.epochs else None

    @property
    def final_train_accuracy(self) -> Optional[float]:
        return self.epochs[-1].train_accuracy if self.epochs else None

    def write_csv(self, path: Path) -> Path:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(REPORT_HEADER)
            for e in self.epochs:
                writer.writerow([
                    e.epoch,
                    f"{e.train_loss:.17g}",
                    f"{e.train_accuracy:.17g}",
                    "" if e.val_accuracy is None else f"{e.val_accuracy:.17g}",
                ])
        return Path(path)


def max_shift(aug: AugmentationConfig, size: int) -> int:
    return int(round(aug.translation_range * size))


def augment_image(
    image: np.ndarray, aug: AugmentationConfig, rng: np.random.Generator
) -> np.ndarray:
    """Random horizontal flip and integer translation with edge replication."""
    out = image
    if aug.horizontal_flip and rng.random() < 0.5:
        out = out[:, ::-1, :]
    shift = max_shift(aug, image.shape[0])
    if shift > 0:
        dy, dx = rng.integers(-shift, shift + 1, size=2)
        if dy or dx:
            padded = np.pad(out, ((shift, shift), (shift, shift), (0, 0)), mode="edge")
            h, w = image.shape[:2]
            top, left = shift - dy, shift - dx
            out = padded[top:top + h, left:left + w, :]
    return np.ascontiguousarray(out)


def prepare_batch(
    ds: Dataset,
    indices: Sequence[int],
    aug: Optional[AugmentationConfig],
    seed: int,
    epoch: int,
    normalization: Optional[FeatureNormalization],
) -> np.ndarray:
    """Augment (keyed by seed/epoch/example index) and normalize a batch."""
    if aug is None or (not aug.horizontal_flip and aug.translation_range == 0):
        batch = ds.images[np.asarray(indices)]
    else:
        batch = np.stack([
            augment_image(ds.images[i], aug, np.random.default_rng([seed, epoch, int(i)]))
            for i in indices
        ])
    if normalization is not None:
        batch = normalization.apply(batch)
    return batch


def evaluate(
    net: Network,
    ds: Dataset,
    normalization: Optional[FeatureNormalization] = None,
    batch_size: int = 64,
) -> float:
    correct = 0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        batch = prepare_batch(ds, idx, None, 0, 0, normalization)
        probs = net.forward(batch).probabilities
        correct += int((net.predict(probs) == ds.labels[idx]).sum())
    return correct / len(ds) if len(ds) else 0.0


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


EpochCallback = Callable[[Network, EpochRecord], bool]


def train(
    net: Network,
    ds: Dataset,
    aug: AugmentationConfig,
    epochs: int,
    lr: Optional[float] = None,
    seed: int = 0,
    val: Optional[Dataset] = None,
    batch_size: int = 32,
    rho: float = 0.9,
    epsilon: float = 1e-8,
    checkpoint_epochs: Sequence[int] = (0,),
    out_dir: Optional[Path] = None,
    early_stop_val_accuracy: Optional[float] = None,
    on_epoch_end: Optional[EpochCallback] = None,
) -> TrainReport:
    """Train `net` in place and return the per-epoch report.

    Checkpoints are kept in memory for every epoch in `checkpoint_epochs` (epoch 0 is the
    untrained network) plus the final epoch, and written under `out_dir/checkpoints` when
    `out_dir` is given. `on_epoch_end` may return True to stop early.
    """
    if ds.label_arity != net.config.n_classes:
        raise ShapeMismatchError(
            f"dataset has {ds.label_arity} classes, network head encodes {net.config.n_classes}"
        )
    lr = lr if lr is not None else net.config.default_learning_rate()
    normalization = FeatureNormalization.fit(ds.images) if aug.featurewise_normalization else None
    state = RMSPropState(rho=rho, epsilon=epsilon)
    report = TrainReport(
        seed=seed,
        config_hash=config_hash({
            "net": net.config.model_dump(mode="json"),
            "aug": aug.model_dump(mode="json"),
            "epochs": epochs,
            "lr": lr,
            "batch_size": batch_size,
            "seed": seed,
            "rho": rho,
            "epsilon": epsilon,
        }),
        epochs_configured=epochs,
        validation_available=val is not None and len(val) > 0,
        normalization=normalization,
    )
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    wanted = set(checkpoint_epochs)

    def keep(epoch: int) -> None:
        ckpt = Checkpoint.from_network(net, epoch, state, normalization, train_seed=seed)
        report.checkpoints[epoch] = ckpt
        if ckpt_dir is not None:
            report.checkpoint_paths.append(save_checkpoint(ckpt_dir / f"epoch_{epoch:03d}.npz", ckpt))

    if 0 in wanted or epochs == 0:
        keep(0)

    last_good = Checkpoint.from_network(net, 0, state, normalization)
    n = len(ds)
    for epoch in range(1, epochs + 1):
        start = time.perf_counter()
        order = np.random.default_rng([seed, epoch]).permutation(n)
        loss_sum, correct = 0.0, 0
        try:
            for b in range(0, n, batch_size):
                idx = order[b:b + batch_size]
                batch = prepare_batch(ds, idx, aug, seed, epoch, normalization)
                grads, loss, probs = net.backward(batch, ds.labels[idx])
                rmsprop_step(state, net.parameters(), grads, lr)
                loss_sum += loss * len(idx)
                correct += int((net.predict(probs) == ds.labels[idx]).sum())
        except NonFiniteError as e:
            net.set_parameters(last_good.params)
            if last_good.optimizer is not None:
                state.restore(last_good.optimizer)
            path = None
            if ckpt_dir is not None:
                path = save_checkpoint(ckpt_dir / "last_good.npz", last_good)
            logger.error("training_diverged", epoch=epoch, seed=seed, error=str(e))
            raise TrainingDivergedError(
                f"training diverged in epoch {epoch}: {e}", last_checkpoint=path
            ) from e

        val_acc = evaluate(net, val, normalization) if report.validation_available else None
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / n,
            train_accuracy=correct / n,
            val_accuracy=val_acc,
            wall_time=time.perf_counter() - start,
        )
        report.epochs.append(record)
        last_good = Checkpoint.from_network(net, epoch, state, normalization)
        logger.info(
            "epoch_finished",
            epoch=epoch,
            seed=seed,
            train_loss=round(record.train_loss, 6),
            train_acc=round(record.train_accuracy, 4),
            val_acc=None if val_acc is None else round(val_acc, 4),
        )

        stop = False
        if early_stop_val_accuracy is not None and val_acc is not None:
            stop = val_acc >= early_stop_val_accuracy
        if on_epoch_end is not None and on_epoch_end(net, record):
            stop = True
        if epoch in wanted or stop or epoch == epochs:
            keep(epoch)
        if stop:
            report.early_stopped = epoch < epochs
            logger.info("early_stopped", epoch=epoch, seed=seed)
            break

    if not report.validation_available:
        logger.warning("no_validation_set", seed=seed, note="train accuracy only")
    return report
