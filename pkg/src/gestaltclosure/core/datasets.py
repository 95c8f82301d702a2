"""
Training datasets: natural images from a class-per-directory tree, white noise,
pixel-shuffled and label-shuffled variants, brightness-scaled variants, and the
stimulus-based CD/BD discrimination sets.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from ..config.settings import DatasetConfig, StimulusConfig, settings
from .errors import DatasetError
from .stimuli import Background, Condition, StimulusSpec, Triple, build_triples, render

logger = structlog.get_logger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
CD_BD_TRAIN_FRACTION = 0.75


class Provenance(str, Enum):
    NATURAL = "natural"
    WHITE_NOISE = "white_noise"
    SHUFFLED_PIXELS = "shuffled_pixels"
    SHUFFLED_LABELS = "shuffled_labels"
    STIMULUS_CD = "stimulus_cd"
    STIMULUS_BD = "stimulus_bd"


class Task(str, Enum):
    CD = "CD"
    BD = "BD"


@dataclass
class Dataset:
    """Images (N x H x W x C, float32 in [-1, +1]) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    label_arity: int
    provenance: Provenance
    class_names: List[str] = field(default_factory=list)
    permutation: Optional[np.ndarray] = None
    permutation_seed: Optional[int] = None
    label_seed: Optional[int] = None
    brightness: float = 1.0
    specs: Optional[List[StimulusSpec]] = None
    triple_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, int]]:
        for image, label in zip(self.images, self.labels):
            yield image, int(label)

    @property
    def examples(self) -> List[Tuple[np.ndarray, int]]:
        return list(self)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.label_arity)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return replace(
            self,
            images=self.images[indices],
            labels=self.labels[indices],
            specs=[self.specs[i] for i in indices] if self.specs is not None else None,
            triple_indices=(
                self.triple_indices[indices] if self.triple_indices is not None else None
            ),
            permutation=(
                self.permutation[indices]
                if self.permutation is not None and self.permutation.ndim == 2
                else self.permutation
            ),
        )


@dataclass
class FeatureNormalization:
    """Per-channel mean/std computed on a training split."""

    mean: np.ndarray
    std: np.ndarray

    MIN_STD = 1e-6

    @classmethod
    def fit(cls, images: np.ndarray) -> "FeatureNormalization":
        mean = images.mean(axis=(0, 1, 2), dtype=np.float64)
        std = images.std(axis=(0, 1, 2), dtype=np.float64)
        return cls(mean=mean, std=np.maximum(std, cls.MIN_STD))

    def apply(self, images: np.ndarray) -> np.ndarray:
        out = (images - self.mean) / self.std
        return out.astype(images.dtype, copy=False)


def derive_seed(seed: int, stream: int) -> int:
    """Independent, reproducible seed for a named random stream of a replicate."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def _decode(path: Path, size: int) -> np.ndarray:
    with PILImage.open(path) as im:
        im = im.convert("RGB").resize((size, size), PILImage.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    return arr / 127.5 - 1.0


def load_natural(
    directory: Path,
    classes: int,
    per_class: int,
    resize: int = 150,
    seed: int = 0,
    on_decode_error: str = "fail",
) -> Dataset:
    """Load `root/<class_name>/*.{png,jpg}`; classes chosen with `seed` when more exist."""
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"Dataset directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(class_dirs) < classes:
        raise DatasetError(f"{root} has {len(class_dirs)} class directories, {classes} requested")
    if len(class_dirs) > classes:
        rng = np.random.default_rng(seed)
        picked = sorted(rng.choice(len(class_dirs), size=classes, replace=False))
        class_dirs = [class_dirs[i] for i in picked]

    images: List[np.ndarray] = []
    labels: List[int] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        loaded = 0
        for path in files:
            if loaded == per_class:
                break
            try:
                images.append(_decode(path, resize))
            except (UnidentifiedImageError, OSError) as e:
                if on_decode_error == "skip":
                    logger.warning("image_skipped", path=str(path), error=str(e))
                    continue
                raise DatasetError(f"Cannot decode image {path}: {e}") from e
            labels.append(label)
            loaded += 1
        if loaded < per_class:
            raise DatasetError(
                f"class '{class_dir.name}' has {loaded} usable images, {per_class} requested"
            )

    logger.info("natural_loaded", root=str(root), classes=classes, per_class=per_class)
    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        label_arity=classes,
        provenance=Provenance.NATURAL,
        class_names=[d.name for d in class_dirs],
    )


def make_white_noise(count: int, classes: int, seed: int, size: int = 150) -> Dataset:
    """i.i.d. uniform [-1, +1] pixels with labels drawn uniformly from `classes` classes."""
    if count <= 0 or classes <= 0:
        raise DatasetError("count and classes must be positive")
    rng = np.random.default_rng(seed)
    images = rng.uniform(-1.0, 1.0, size=(count, size, size, 3)).astype(np.float32)
    labels = rng.integers(0, classes, size=count)
    return Dataset(
        images=images,
        labels=labels.astype(np.int64),
        label_arity=classes,
        provenance=Provenance.WHITE_NOISE,
        class_names=[f"noise_{k}" for k in range(classes)],
    )


def apply_pixel_permutation(ds: Dataset, permutation: np.ndarray) -> Dataset:
    """Output pixel k takes input pixel permutation[k] in every image; channels move together."""
    n, h, w, c = ds.images.shape
    flat = ds.images.reshape(n, h * w, c)
    if permutation.ndim == 1:
        shuffled = flat[:, permutation, :]
    else:
        shuffled = np.take_along_axis(flat, permutation[:, :, None], axis=1)
    return replace(
        ds,
        images=shuffled.reshape(n, h, w, c),
        provenance=Provenance.SHUFFLED_PIXELS,
        permutation=permutation,
    )


def shuffle_pixels(ds: Dataset, seed: int, per_image: bool = False) -> Dataset:
    """Apply one seeded spatial permutation to every image (or one per image)."""
    n, h, w, _ = ds.images.shape
    rng = np.random.default_rng(seed)
    if per_image:
        permutation = np.stack([rng.permutation(h * w) for _ in range(n)])
    else:
        permutation = rng.permutation(h * w)
    out = apply_pixel_permutation(ds, permutation)
    out.permutation_seed = seed
    return out


def unshuffle_pixels(ds: Dataset) -> Dataset:
    if ds.permutation is None:
        raise DatasetError("dataset carries no pixel permutation")
    inverse = np.argsort(ds.permutation, axis=-1)
    n, h, w, c = ds.images.shape
    flat = ds.images.reshape(n, h * w, c)
    if inverse.ndim == 1:
        restored = flat[:, inverse, :]
    else:
        restored = np.take_along_axis(flat, inverse[:, :, None], axis=1)
    return replace(ds, images=restored.reshape(n, h, w, c), provenance=Provenance.NATURAL,
                   permutation=None, permutation_seed=None)


def shuffle_labels(ds: Dataset, seed: int) -> Dataset:
    """Permute the label column; images are untouched."""
    if len(ds) == 0:
        raise DatasetError("cannot shuffle labels of an empty dataset")
    rng = np.random.default_rng(seed)
    labels = ds.labels[rng.permutation(len(ds))]
    return replace(ds, labels=labels, provenance=Provenance.SHUFFLED_LABELS, label_seed=seed)


def scale_brightness(ds: Dataset, factor: float) -> Dataset:
    """Multiply every pixel by `factor` and saturate to [-1, +1]."""
    if factor <= 0:
        raise DatasetError("brightness factor must be positive")
    images = np.clip(ds.images * np.float32(factor), -1.0, 1.0).astype(np.float32)
    return replace(ds, images=images, brightness=ds.brightness * factor)


def split_dataset(ds: Dataset, val_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    n_val = int(round(len(ds) * val_fraction))
    return ds.subset(np.sort(order[n_val:])), ds.subset(np.sort(order[:n_val]))


def stimulus_label(spec: StimulusSpec, task: Task) -> int:
    if task == Task.CD:
        return 0 if spec.condition == Condition.DISORDERED else 1
    return 1 if spec.background == Background.BLACK else 0


def split_triples(triples: Sequence[Triple], split_seed: int) -> Tuple[List[Triple], List[Triple]]:
    """Seeded 75/25 split of triples, each side kept in triple-index order."""
    order = np.random.default_rng(split_seed).permutation(len(triples))
    n_train = int(len(triples) * CD_BD_TRAIN_FRACTION)
    train = sorted((triples[i] for i in order[:n_train]), key=lambda t: t.index)
    val = sorted((triples[i] for i in order[n_train:]), key=lambda t: t.index)
    return train, val


def _stimulus_dataset(
    triples: Sequence[Triple],
    task: Task,
    images: Dict[StimulusSpec, np.ndarray],
) -> Dataset:
    specs: List[StimulusSpec] = []
    triple_indices: List[int] = []
    for t in triples:
        for spec in t.members():
            specs.append(spec)
            triple_indices.append(t.index)
    return Dataset(
        images=np.stack([images[s] for s in specs]),
        labels=np.asarray([stimulus_label(s, task) for s in specs], dtype=np.int64),
        label_arity=2,
        provenance=Provenance.STIMULUS_CD if task == Task.CD else Provenance.STIMULUS_BD,
        class_names=["0", "1"],
        specs=specs,
        triple_indices=np.asarray(triple_indices, dtype=np.int64),
    )


def make_cd_bd_sets(
    triples: Sequence[Triple],
    task: Task,
    split_seed: int,
    images: Optional[Dict[StimulusSpec, np.ndarray]] = None,
    config: Optional[StimulusConfig] = None,
) -> Tuple[Dataset, Dataset]:
    """Binary closure (CD) or background (BD) discrimination sets over a triple split."""
    task = Task(task)
    if images is None:
        needed = {s for t in triples for s in t.members()}
        images = {s: render(s, config) for s in needed}
    train_triples, val_triples = split_triples(triples, split_seed)
    train = _stimulus_dataset(train_triples, task, images)
    val = _stimulus_dataset(val_triples, task, images)
    logger.info(
        "stimulus_sets_built",
        task=task.value,
        train_triples=len(train_triples),
        val_triples=len(val_triples),
    )
    return train, val


def datasets_from_config(
    config: DatasetConfig,
    seed: int,
    stimulus: Optional[StimulusConfig] = None,
    triple_seed: int = 0,
    split_seed: int = 0,
) -> Tuple[Dataset, Optional[Dataset]]:
    """Train/validation sets described by a `train --config` dataset section."""
    if config.kind in ("cd", "bd"):
        triples = build_triples(triple_seed)
        return make_cd_bd_sets(triples, Task(config.kind.upper()), split_seed, config=stimulus)
    if config.kind == "white_noise":
        return make_white_noise(config.white_noise_count, config.classes, seed, config.image_size), None

    root = config.root or settings.data_dir
    if root is None:
        raise DatasetError("no natural-image directory: set dataset.root or GCL_DATA_DIR")
    ds = load_natural(
        root,
        config.classes,
        config.per_class,
        resize=config.image_size,
        seed=split_seed,
        on_decode_error=config.on_decode_error,
    )
    if config.transform == "shuffled_pixels":
        ds = shuffle_pixels(ds, derive_seed(seed, 2), per_image=config.per_image_shuffle)
    elif config.transform == "shuffled_labels":
        ds = shuffle_labels(ds, derive_seed(seed, 3))
    if config.brightness != 1.0:
        ds = scale_brightness(ds, config.brightness)
    return split_dataset(ds, config.val_fraction, split_seed)
