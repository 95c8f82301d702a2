"""
Triangle closure stimuli: factor enumeration, rasterization, matched triples and export.

Canonical order of the 992 specs is condition-major (complete, aligned, disordered),
then background, position, theta_global, edge_length, theta_local. The index of a spec
in that order is its canonical index, used by every file this module writes.
"""

import csv
import itertools
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from PIL import Image as PILImage

from ..config.settings import StimulusConfig
from .errors import InvalidStimulusError, TripleAssignmentError

logger = structlog.get_logger(__name__)

THETA_GLOBAL_LEVELS: Tuple[int, ...] = (0, 15, 30, 45, 60, 75, 90, 105)
EDGE_LENGTH_LEVELS: Tuple[int, ...] = (3, 8, 13, 18, 24, 29)
THETA_LOCAL_LEVELS: Tuple[int, ...] = (72, 144, 216, 288)

ALIGNED_REPEATS = 4
COMPLETE_REPEATS = 24
MAX_ASSIGNMENT_RESTARTS = 50

MANIFEST_HEADER = [
    "index", "condition", "background", "position",
    "theta_global", "edge_length", "theta_local", "filename",
]
TRIPLES_HEADER = ["index", "edge_length", "complete", "aligned", "disordered"]


class Condition(str, Enum):
    COMPLETE = "complete"
    ALIGNED = "aligned"
    DISORDERED = "disordered"


class Background(str, Enum):
    BLACK = "black"
    WHITE = "white"


class Position(str, Enum):
    CENTERED = "centered"
    OFFSET = "offset"


class ExportFormat(str, Enum):
    PNG = "png"
    RAW = "raw-f32"


@dataclass(frozen=True)
class StimulusSpec:
    """The controlled factors that identify one stimulus image."""

    condition: Condition
    background: Background
    position: Position
    theta_global: int
    edge_length: Optional[int] = None
    theta_local: Optional[int] = None

    def __post_init__(self):
        if self.condition == Condition.COMPLETE:
            if self.edge_length is not None or self.theta_local is not None:
                raise InvalidStimulusError("complete specs carry neither edge_length nor theta_local")
        elif self.condition == Condition.ALIGNED:
            if self.edge_length is None or self.theta_local is not None:
                raise InvalidStimulusError("aligned specs carry edge_length only")
        elif self.edge_length is None or self.theta_local is None:
            raise InvalidStimulusError("disordered specs carry edge_length and theta_local")

    def validate_levels(self) -> None:
        """Reject factor values outside the enumerated levels."""
        if self.theta_global not in THETA_GLOBAL_LEVELS:
            raise InvalidStimulusError(f"theta_global {self.theta_global} is not an enumerated level")
        if self.edge_length is not None and self.edge_length not in EDGE_LENGTH_LEVELS:
            raise InvalidStimulusError(f"edge_length {self.edge_length} is not an enumerated level")
        if self.theta_local is not None and self.theta_local not in THETA_LOCAL_LEVELS:
            raise InvalidStimulusError(f"theta_local {self.theta_local} is not an enumerated level")

    def as_row(self) -> Dict[str, str]:
        return {
            "condition": self.condition.value,
            "background": self.background.value,
            "position": self.position.value,
            "theta_global": str(self.theta_global),
            "edge_length": "" if self.edge_length is None else str(self.edge_length),
            "theta_local": "" if self.theta_local is None else str(self.theta_local),
        }


@dataclass(frozen=True)
class Triple:
    """A matched (complete, aligned, disordered) trio."""

    index: int
    complete: StimulusSpec
    aligned: StimulusSpec
    disordered: StimulusSpec
    edge_length: int

    def members(self) -> Tuple[StimulusSpec, StimulusSpec, StimulusSpec]:
        return self.complete, self.aligned, self.disordered


@lru_cache(maxsize=1)
def _canonical_specs() -> Tuple[StimulusSpec, ...]:
    specs: List[StimulusSpec] = []
    for bg, pos, theta in itertools.product(Background, Position, THETA_GLOBAL_LEVELS):
        specs.append(StimulusSpec(Condition.COMPLETE, bg, pos, theta))
    for bg, pos, theta, edge in itertools.product(
        Background, Position, THETA_GLOBAL_LEVELS, EDGE_LENGTH_LEVELS
    ):
        specs.append(StimulusSpec(Condition.ALIGNED, bg, pos, theta, edge))
    for bg, pos, theta, edge, local in itertools.product(
        Background, Position, THETA_GLOBAL_LEVELS, EDGE_LENGTH_LEVELS, THETA_LOCAL_LEVELS
    ):
        specs.append(StimulusSpec(Condition.DISORDERED, bg, pos, theta, edge, local))
    return tuple(specs)


def enumerate_specs() -> List[StimulusSpec]:
    """All 992 specs in canonical order."""
    return list(_canonical_specs())


@lru_cache(maxsize=1)
def spec_index() -> Dict[StimulusSpec, int]:
    return {spec: i for i, spec in enumerate(_canonical_specs())}


# Geometry ---------------------------------------------------------------


def side_removal_fraction(edge_length: float, vertex_distance: float = 116.0) -> float:
    """Fraction of each triangle side not covered by the two stubs at its ends."""
    return (vertex_distance - 2.0 * edge_length) / vertex_distance


def shape_center(position: Position, config: StimulusConfig) -> Tuple[float, float]:
    c = config.image_size / 2.0
    if position == Position.OFFSET:
        return c + config.offset, c + config.offset
    return c, c


def triangle_vertices(
    center: Tuple[float, float], theta_global: float, vertex_distance: float = 116.0
) -> np.ndarray:
    """Vertices (3x2, image x/y with y pointing down) of the rotated equilateral triangle."""
    radius = vertex_distance / np.sqrt(3.0)
    angles = np.deg2rad(theta_global + 90.0 + 120.0 * np.arange(3))
    xs = center[0] + radius * np.cos(angles)
    ys = center[1] - radius * np.sin(angles)
    return np.stack([xs, ys], axis=1)


def _rotate(vec: np.ndarray, degrees: float) -> np.ndarray:
    # Counter-clockwise as seen on screen, hence the flipped y.
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    x, y = vec
    return np.array([c * x + s * y, -s * x + c * y])


def fragment_segments(
    vertices: np.ndarray, edge_length: float, theta_local: float = 0.0
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Two stubs per corner, optionally rotated about their own vertex."""
    segments = []
    for k in range(3):
        v = vertices[k]
        for n in ((k + 1) % 3, (k + 2) % 3):
            direction = vertices[n] - v
            direction = direction / np.linalg.norm(direction)
            if theta_local:
                direction = _rotate(direction, theta_local)
            segments.append((v, v + edge_length * direction))
    return segments


def _stamp_segment(mask: np.ndarray, p0, p1, half_width: float, ss: int) -> None:
    h, w = mask.shape[0] // ss, mask.shape[1] // ss
    x0, y0 = p0
    x1, y1 = p1
    xmin = max(int(np.floor(min(x0, x1) - half_width - 1)), 0)
    xmax = min(int(np.ceil(max(x0, x1) + half_width + 1)), w)
    ymin = max(int(np.floor(min(y0, y1) - half_width - 1)), 0)
    ymax = min(int(np.ceil(max(y0, y1) + half_width + 1)), h)
    if xmin >= xmax or ymin >= ymax:
        return
    xs = (np.arange(xmin * ss, xmax * ss) + 0.5) / ss
    ys = (np.arange(ymin * ss, ymax * ss) + 0.5) / ss
    gx, gy = np.meshgrid(xs, ys)
    dx, dy = x1 - x0, y1 - y0
    length = np.hypot(dx, dy)
    if length == 0:
        hit = (gx - x0) ** 2 + (gy - y0) ** 2 <= half_width ** 2
    else:
        ux, uy = dx / length, dy / length
        t = (gx - x0) * ux + (gy - y0) * uy
        perp = -(gx - x0) * uy + (gy - y0) * ux
        hit = (t >= 0) & (t <= length) & (np.abs(perp) <= half_width)
    mask[ymin * ss:ymax * ss, xmin * ss:xmax * ss] |= hit


def draw_shape(
    condition: Condition,
    background: Background,
    center: Tuple[float, float],
    theta_global: float,
    edge_length: Optional[float] = None,
    theta_local: Optional[float] = None,
    config: Optional[StimulusConfig] = None,
) -> np.ndarray:
    """Rasterize a shape without checking factor levels; see `render` for the checked entry."""
    config = config or StimulusConfig()
    size, ss = config.image_size, config.antialias_samples
    half = config.stroke_width / 2.0
    vertices = triangle_vertices(center, theta_global, config.vertex_distance)

    if condition == Condition.COMPLETE:
        segments = [(vertices[k], vertices[(k + 1) % 3]) for k in range(3)]
    else:
        local = theta_local if condition == Condition.DISORDERED else 0.0
        segments = fragment_segments(vertices, edge_length, local or 0.0)

    mask = np.zeros((size * ss, size * ss), dtype=bool)
    for p0, p1 in segments:
        _stamp_segment(mask, p0, p1, half, ss)
    # Round joins at the vertices.
    for v in vertices:
        _stamp_segment(mask, v, v, half, ss)

    coverage = mask.reshape(size, ss, size, ss).mean(axis=(1, 3))
    if background == Background.BLACK:
        bg, fg = -1.0, 1.0
    else:
        bg, fg = 1.0, -1.0
    plane = bg + (fg - bg) * coverage
    return np.repeat(plane[:, :, None], 3, axis=2).astype(np.float32)


def render(spec: StimulusSpec, config: Optional[StimulusConfig] = None) -> np.ndarray:
    """Render a spec to an HxWx3 float32 image with values in [-1, +1]."""
    spec.validate_levels()
    config = config or StimulusConfig()
    return draw_shape(
        spec.condition,
        spec.background,
        shape_center(spec.position, config),
        spec.theta_global,
        spec.edge_length,
        spec.theta_local,
        config,
    )


def render_all(
    specs: Sequence[StimulusSpec], config: Optional[StimulusConfig] = None
) -> Dict[StimulusSpec, np.ndarray]:
    return {spec: render(spec, config) for spec in specs}


def foreground_mask(image: np.ndarray, background: Background) -> np.ndarray:
    """Pixels covered by more than half a stroke."""
    plane = image[..., 0] if image.ndim == 3 else image
    return plane > 0 if background == Background.BLACK else plane < 0


# Triples ----------------------------------------------------------------


def _admissible(complete: StimulusSpec, disordered: StimulusSpec, strict_position: bool) -> bool:
    if complete.theta_global == disordered.theta_global:
        return False
    if strict_position and complete.position == disordered.position:
        return False
    return True


def _assign_completes(
    disordered: List[StimulusSpec],
    completes: Dict[Background, List[StimulusSpec]],
    rng: np.random.Generator,
    strict_position: bool,
) -> Optional[List[StimulusSpec]]:
    remaining = {c: COMPLETE_REPEATS for group in completes.values() for c in group}
    chosen: List[Optional[StimulusSpec]] = [None] * len(disordered)

    for i in rng.permutation(len(disordered)):
        d = disordered[i]
        pool = completes[d.background]
        candidates = [c for c in pool if remaining[c] > 0 and _admissible(c, d, strict_position)]
        if candidates:
            weights = np.array([remaining[c] for c in candidates], dtype=float)
            pick = candidates[rng.choice(len(candidates), p=weights / weights.sum())]
            chosen[i] = pick
            remaining[pick] -= 1
            continue

        # Swap repair: hand d an already-used complete and move its owner to a free one.
        repaired = False
        free = [c for c in pool if remaining[c] > 0]
        for j in rng.permutation(len(disordered)):
            owner = chosen[j]
            if owner is None or owner.background != d.background:
                continue
            if not _admissible(owner, d, strict_position):
                continue
            for c in free:
                if _admissible(c, disordered[j], strict_position):
                    chosen[j] = c
                    remaining[c] -= 1
                    chosen[i] = owner
                    repaired = True
                    break
            if repaired:
                break
        if not repaired:
            return None

    return chosen  # type: ignore[return-value]


def build_triples(
    seed: int, strict_position: bool = False, max_restarts: int = MAX_ASSIGNMENT_RESTARTS
) -> List[Triple]:
    """Pair every disordered spec with its aligned counterpart and a seeded complete spec.

    The aligned partner is fixed by the matching rule (background, position, theta_global
    and edge_length), which uses each aligned spec exactly four times. Complete partners
    share the background, differ in theta_global (and position when `strict_position`),
    and are drawn so that each complete spec is used exactly 24 times.
    """
    specs = _canonical_specs()
    aligned_by_key = {
        (s.background, s.position, s.theta_global, s.edge_length): s
        for s in specs
        if s.condition == Condition.ALIGNED
    }
    completes: Dict[Background, List[StimulusSpec]] = {b: [] for b in Background}
    for s in specs:
        if s.condition == Condition.COMPLETE:
            completes[s.background].append(s)
    disordered = [s for s in specs if s.condition == Condition.DISORDERED]

    assignment = None
    for attempt in range(max_restarts):
        rng = np.random.default_rng([seed, attempt])
        assignment = _assign_completes(disordered, completes, rng, strict_position)
        if assignment is not None:
            if attempt:
                logger.info("triple_assignment_restarted", seed=seed, attempts=attempt + 1)
            break
    if assignment is None:
        raise TripleAssignmentError(
            f"no quota-satisfying triple assignment for seed {seed} after {max_restarts} restarts"
        )

    triples = []
    for i, (d, c) in enumerate(zip(disordered, assignment)):
        a = aligned_by_key[(d.background, d.position, d.theta_global, d.edge_length)]
        triples.append(Triple(i, c, a, d, d.edge_length))
    return triples


# Export -----------------------------------------------------------------


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round((image.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_png(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 127.5 - 1.0


def load_raw(path: Path, shape: Tuple[int, int, int] = (150, 150, 3)) -> np.ndarray:
    return np.fromfile(path, dtype="<f4").reshape(shape).astype(np.float32)


def export_stimuli(
    directory: Path,
    fmt: ExportFormat = ExportFormat.PNG,
    config: Optional[StimulusConfig] = None,
) -> Path:
    """Write every stimulus image and a manifest CSV; returns the manifest path."""
    directory = Path(directory)
    fmt = ExportFormat(fmt)
    directory.mkdir(parents=True, exist_ok=True)
    ext = "png" if fmt == ExportFormat.PNG else "f32"
    manifest_path = directory / "manifest.csv"

    rows = []
    for index, spec in enumerate(_canonical_specs()):
        filename = f"{index:04d}_{spec.condition.value}.{ext}"
        target = directory / filename
        image = render(spec, config)
        try:
            if fmt == ExportFormat.PNG:
                PILImage.fromarray(to_uint8(image)).save(target, format="PNG")
            else:
                image.astype("<f4").tofile(target)
        except OSError as e:
            raise OSError(f"Failed to write stimulus {target}: {e}") from e
        row = {"index": str(index), **spec.as_row(), "filename": filename}
        rows.append(row)

    try:
        with open(manifest_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=MANIFEST_HEADER)
            writer.writeheader()
            writer.writerows(rows)
    except OSError as e:
        raise OSError(f"Failed to write manifest {manifest_path}: {e}") from e

    logger.info("stimuli_exported", directory=str(directory), format=fmt.value, count=len(rows))
    return manifest_path


def read_manifest(path: Path) -> List[Dict[str, str]]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_triples_csv(triples: Sequence[Triple], path: Path) -> Path:
    index = spec_index()
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(TRIPLES_HEADER)
        for t in triples:
            writer.writerow(
                [t.index, t.edge_length, index[t.complete], index[t.aligned], index[t.disordered]]
            )
    return Path(path)


def read_triples_csv(path: Path) -> List[Triple]:
    specs = _canonical_specs()
    triples = []
    with open(path, "r", newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            triples.append(
                Triple(
                    index=int(row["index"]),
                    complete=specs[int(row["complete"])],
                    aligned=specs[int(row["aligned"])],
                    disordered=specs[int(row["disordered"])],
                    edge_length=int(row["edge_length"]),
                )
            )
    return triples
