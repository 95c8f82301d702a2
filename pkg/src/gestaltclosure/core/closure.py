"""
The closure measure: layer embeddings of the stimuli, per-triple closure values
C_i = cos(f(aligned), f(complete)) - cos(f(disordered), f(complete)), and their
aggregation into per-edge-length curves and slopes.
"""

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import structlog

from ..config.settings import StimulusConfig
from .checkpoint import Checkpoint
from .datasets import FeatureNormalization
from .errors import (
    DegenerateSampleError,
    MissingEmbeddingError,
    NonFiniteError,
    ShapeMismatchError,
    UnknownLayerError,
)
from .network import Network
from .stats import t_ppf
from .stimuli import EDGE_LENGTH_LEVELS, StimulusSpec, Triple, render

logger = structlog.get_logger(__name__)

RECORDS_HEADER = ["model_id", "layer", "triple_index", "edge_length", "s_ac", "s_dc", "C"]
CURVES_HEADER = ["model_id", "layer", "edge_length", "mean_C", "ci_lo", "ci_hi", "n"]

CIMethod = Literal["bootstrap", "t"]


class DeadEmbeddingWarning(UserWarning):
    """Cosine taken against an all-zero embedding."""


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.17g}"


def _parse(value: str) -> Optional[float]:
    return None if value == "" else float(value)


# Similarity -------------------------------------------------------------


def _cosine(x: np.ndarray, y: np.ndarray) -> Tuple[float, bool]:
    """Cosine plus a flag set when exactly one vector is all zeros."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeMismatchError(f"cosine of vectors with lengths {x.size} and {y.size}")
    nx, ny = float(np.linalg.norm(x)), float(np.linalg.norm(y))
    if nx == 0.0 and ny == 0.0:
        return 0.0, False
    if nx == 0.0 or ny == 0.0:
        return 0.0, True
    value = float(x @ y) / (nx * ny)
    return max(-1.0, min(1.0, value)), False


def cosine(x: np.ndarray, y: np.ndarray) -> float:
    """x.y / (|x||y|); 0 when either vector is all zeros (warns when only one is)."""
    value, dead = _cosine(x, y)
    if dead:
        warnings.warn("cosine against an all-zero embedding", DeadEmbeddingWarning, stacklevel=2)
    return value


# Embeddings -------------------------------------------------------------


@dataclass
class Embedding:
    vector: np.ndarray
    layer_name: str
    source_spec: StimulusSpec
    model_id: str

    def __post_init__(self):
        if self.vector.size == 0:
            raise ShapeMismatchError(f"empty embedding for layer {self.layer_name}")
        if not np.all(np.isfinite(self.vector)):
            raise NonFiniteError(f"non-finite embedding at layer {self.layer_name}")

    @property
    def dim(self) -> int:
        return int(self.vector.size)


def embed_stimuli(
    net: Network,
    checkpoint: Optional[Checkpoint],
    layer_names: Sequence[str],
    specs: Sequence[StimulusSpec],
    model_id: str = "model",
    images: Optional[Dict[StimulusSpec, np.ndarray]] = None,
    normalization: Optional[FeatureNormalization] = None,
    stimulus_config: Optional[StimulusConfig] = None,
    batch_size: int = 32,
    jobs: int = 1,
) -> List[Embedding]:
    """Record `layer_names` for every spec, layer-major then in spec order.

    When a checkpoint is given its weights are loaded into `net` and its stored
    normalization preprocesses the stimuli; `normalization` overrides it.
    """
    unknown = [name for name in layer_names if name not in net.layer_names]
    if unknown:
        raise UnknownLayerError(unknown[0], net.layer_names)
    if checkpoint is not None:
        checkpoint.load_into(net)
        if normalization is None:
            normalization = checkpoint.normalization

    specs = list(specs)
    if images is None:
        images = {s: render(s, stimulus_config) for s in specs}

    def run(start: int) -> Dict[str, np.ndarray]:
        batch = np.stack([images[s] for s in specs[start:start + batch_size]])
        if normalization is not None:
            batch = normalization.apply(batch)
        return net.forward(batch, record_layers=layer_names).activations

    starts = range(0, len(specs), batch_size)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(run, starts))
    else:
        chunks = [run(s) for s in starts]

    out: List[Embedding] = []
    for name in layer_names:
        rows = np.concatenate([c[name] for c in chunks]) if chunks else np.empty((0, 0))
        out.extend(
            Embedding(vector=rows[i], layer_name=name, source_spec=spec, model_id=model_id)
            for i, spec in enumerate(specs)
        )
    logger.debug("stimuli_embedded", model_id=model_id, layers=list(layer_names), specs=len(specs))
    return out


# Records ----------------------------------------------------------------


@dataclass
class ClosureRecord:
    triple_index: int
    edge_length: int
    c: float
    s_ac: float
    s_dc: float
    layer_name: str
    model_id: str
    degenerate: bool = False

    def as_row(self) -> List[str]:
        return [
            self.model_id,
            self.layer_name,
            str(self.triple_index),
            str(self.edge_length),
            _fmt(self.s_ac),
            _fmt(self.s_dc),
            _fmt(self.c),
        ]


def closure_per_triple(
    embeddings: Sequence[Embedding], triples: Sequence[Triple], layer: str
) -> List[ClosureRecord]:
    lookup: Dict[StimulusSpec, Embedding] = {
        e.source_spec: e for e in embeddings if e.layer_name == layer
    }
    model_ids = {e.model_id for e in lookup.values()}
    if len(model_ids) > 1:
        raise ShapeMismatchError(f"embeddings of several models at layer {layer}: {sorted(model_ids)}")

    records: List[ClosureRecord] = []
    dead = 0
    for t in triples:
        try:
            fc, fa, fd = lookup[t.complete], lookup[t.aligned], lookup[t.disordered]
        except KeyError as e:
            raise MissingEmbeddingError(
                f"no embedding at layer '{layer}' for {e.args[0]} (triple {t.index})"
            ) from None
        s_ac, dead_a = _cosine(fa.vector, fc.vector)
        s_dc, dead_d = _cosine(fd.vector, fc.vector)
        degenerate = dead_a or dead_d
        dead += degenerate
        records.append(
            ClosureRecord(
                triple_index=t.index,
                edge_length=t.edge_length,
                c=s_ac - s_dc,
                s_ac=s_ac,
                s_dc=s_dc,
                layer_name=layer,
                model_id=fc.model_id,
                degenerate=degenerate,
            )
        )
    if dead:
        warnings.warn(
            f"{dead} triples at layer {layer} compare against an all-zero embedding",
            DeadEmbeddingWarning,
            stacklevel=2,
        )
        logger.warning("dead_embeddings", layer=layer, triples=dead)
    out_of_range = sum(1 for r in records if abs(r.c) > 1.0)
    if out_of_range:
        logger.warning("closure_out_of_range", layer=layer, triples=out_of_range)
    return records


# Curves -----------------------------------------------------------------


@dataclass
class CurvePoint:
    edge_length: int
    mean: float
    ci_lo: Optional[float]
    ci_hi: Optional[float]
    n: int
    flags: List[str] = field(default_factory=list)

    @property
    def half_width(self) -> Optional[float]:
        if self.ci_lo is None or self.ci_hi is None:
            return None
        return (self.ci_hi - self.ci_lo) / 2.0


@dataclass
class ClosureCurve:
    model_id: str
    layer_name: str
    points: List[CurvePoint]

    @property
    def edge_lengths(self) -> List[int]:
        return [p.edge_length for p in self.points]

    @property
    def means(self) -> List[float]:
        return [p.mean for p in self.points]

    @property
    def flagged(self) -> bool:
        return any(p.flags for p in self.points)


def _mean(values: np.ndarray) -> float:
    return math.fsum(values.tolist()) / len(values)


def _bootstrap_interval(
    values: np.ndarray, samples: int, rng: np.random.Generator, confidence: float
) -> Tuple[float, float]:
    idx = rng.integers(0, len(values), size=(samples, len(values)))
    means = values[idx].mean(axis=1)
    tail = (1.0 - confidence) / 2.0
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    return float(lo), float(hi)


def _t_interval(values: np.ndarray, confidence: float) -> Tuple[float, float]:
    n = len(values)
    mean = _mean(values)
    sd = float(np.std(values, ddof=1))
    half = t_ppf(1.0 - (1.0 - confidence) / 2.0, n - 1) * sd / math.sqrt(n)
    return mean - half, mean + half


def _single(records: Sequence[ClosureRecord], attr: str) -> str:
    values = {getattr(r, attr) for r in records}
    return values.pop() if len(values) == 1 else "+".join(sorted(values))


def closure_curve(
    records: Sequence[ClosureRecord],
    ci: CIMethod = "bootstrap",
    bootstrap_samples: int = 1000,
    seed: int = 0,
    confidence: float = 0.95,
    edge_lengths: Sequence[int] = EDGE_LENGTH_LEVELS,
) -> ClosureCurve:
    """Mean closure and its uncertainty at each edge length.

    Values are sorted within each group before aggregation and the bootstrap generator is
    keyed by (seed, edge length), so the curve does not depend on record order. Records
    pooled from several models (one replicate each) are aggregated together.
    """
    if not records:
        raise DegenerateSampleError("no closure records to aggregate")
    groups: Dict[int, List[float]] = {e: [] for e in edge_lengths}
    for r in records:
        if r.edge_length not in groups:
            raise DegenerateSampleError(f"unexpected edge length {r.edge_length}")
        groups[r.edge_length].append(r.c)

    points: List[CurvePoint] = []
    for edge in edge_lengths:
        values = np.sort(np.asarray(groups[edge], dtype=np.float64))
        if values.size == 0:
            raise DegenerateSampleError(f"no closure records at edge length {edge}")
        mean = _mean(values)
        flags: List[str] = []
        lo: Optional[float]
        hi: Optional[float]
        if values.size < 2:
            lo = hi = None
            flags.append("n<2")
        elif ci == "bootstrap":
            lo, hi = _bootstrap_interval(
                values, bootstrap_samples, np.random.default_rng([seed, edge]), confidence
            )
        else:
            lo, hi = _t_interval(values, confidence)
        if not -1.0 <= mean <= 1.0:
            flags.append("out_of_range")
            logger.warning("closure_mean_out_of_range", edge_length=edge, mean=mean)
        points.append(CurvePoint(edge, mean, lo, hi, int(values.size), flags))
    return ClosureCurve(_single(records, "model_id"), _single(records, "layer_name"), points)


def curves_by_model(
    records: Sequence[ClosureRecord], **kwargs
) -> Dict[Tuple[str, str], ClosureCurve]:
    """One curve per (model_id, layer) found in `records`."""
    grouped: Dict[Tuple[str, str], List[ClosureRecord]] = {}
    for r in records:
        grouped.setdefault((r.model_id, r.layer_name), []).append(r)
    return {key: closure_curve(group, **kwargs) for key, group in sorted(grouped.items())}


# Slopes and replication intervals ---------------------------------------


@dataclass
class SlopeEstimate:
    slope: float
    ci_lo: Optional[float]
    ci_hi: Optional[float]
    n: int
    method: str

    @property
    def excludes_zero(self) -> bool:
        if self.ci_lo is None or self.ci_hi is None:
            return False
        return self.ci_lo > 0.0 or self.ci_hi < 0.0

    @property
    def positive(self) -> bool:
        return self.excludes_zero and self.slope > 0.0

    def to_dict(self) -> dict:
        return {
            "slope": self.slope,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "n": self.n,
            "method": self.method,
        }


def _ols_slope(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        return float("nan")
    return float(dx @ (y - y.mean())) / sxx


def closure_slope(
    records: Sequence[ClosureRecord],
    ci: Optional[CIMethod] = "bootstrap",
    bootstrap_samples: int = 1000,
    seed: int = 0,
    confidence: float = 0.95,
) -> SlopeEstimate:
    """Least-squares slope of C_i on edge length, with a CI over triples."""
    if len(records) < 3:
        raise DegenerateSampleError(f"slope needs at least 3 records (got {len(records)})")
    pairs = sorted((r.edge_length, r.c) for r in records)
    x = np.array([p[0] for p in pairs], dtype=np.float64)
    y = np.array([p[1] for p in pairs], dtype=np.float64)
    slope = _ols_slope(x, y)
    if math.isnan(slope):
        raise DegenerateSampleError("slope needs records at more than one edge length")
    if ci is None:
        return SlopeEstimate(slope, None, None, len(x), "none")
    tail = (1.0 - confidence) / 2.0

    if ci == "bootstrap":
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, len(x), size=(bootstrap_samples, len(x)))
        xs, ys = x[idx], y[idx]
        dx = xs - xs.mean(axis=1, keepdims=True)
        sxx = (dx * dx).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            slopes = (dx * (ys - ys.mean(axis=1, keepdims=True))).sum(axis=1) / sxx
        slopes = slopes[np.isfinite(slopes)]
        lo, hi = np.quantile(slopes, [tail, 1.0 - tail])
        return SlopeEstimate(slope, float(lo), float(hi), len(x), "bootstrap")

    n = len(x)
    intercept = y.mean() - slope * x.mean()
    resid = y - (intercept + slope * x)
    dx = x - x.mean()
    se = math.sqrt(float(resid @ resid) / (n - 2) / float(dx @ dx))
    half = t_ppf(1.0 - tail, n - 2) * se
    return SlopeEstimate(slope, slope - half, slope + half, n, "t")


@dataclass
class ReplicationInterval:
    mean: float
    ci_lo: Optional[float]
    ci_hi: Optional[float]
    n: int

    @property
    def excludes_zero(self) -> bool:
        if self.ci_lo is None or self.ci_hi is None:
            return False
        return self.ci_lo > 0.0 or self.ci_hi < 0.0

    def to_dict(self) -> dict:
        return {"mean": self.mean, "ci_lo": self.ci_lo, "ci_hi": self.ci_hi, "n": self.n}


def replication_interval(values: Sequence[float], confidence: float = 0.95) -> ReplicationInterval:
    """Mean over replications with a Student-t interval (undefined for one replication)."""
    data = np.sort(np.asarray(values, dtype=np.float64))
    if data.size == 0:
        raise DegenerateSampleError("no replications")
    if data.size < 2:
        return ReplicationInterval(float(data[0]), None, None, 1)
    lo, hi = _t_interval(data, confidence)
    return ReplicationInterval(_mean(data), lo, hi, int(data.size))


# CSV --------------------------------------------------------------------


def write_records_csv(records: Sequence[ClosureRecord], path: Path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(RECORDS_HEADER)
        for r in records:
            writer.writerow(r.as_row())
    return Path(path)


def read_records_csv(path: Path) -> List[ClosureRecord]:
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != RECORDS_HEADER:
            raise ShapeMismatchError(f"{path} is not a closure records file")
        return [
            ClosureRecord(
                triple_index=int(row["triple_index"]),
                edge_length=int(row["edge_length"]),
                c=float(row["C"]),
                s_ac=float(row["s_ac"]),
                s_dc=float(row["s_dc"]),
                layer_name=row["layer"],
                model_id=row["model_id"],
            )
            for row in reader
        ]


def write_curves_csv(curves: Sequence[ClosureCurve], path: Path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CURVES_HEADER)
        for curve in curves:
            for p in curve.points:
                writer.writerow([
                    curve.model_id,
                    curve.layer_name,
                    p.edge_length,
                    _fmt(p.mean),
                    _fmt(p.ci_lo),
                    _fmt(p.ci_hi),
                    p.n,
                ])
    return Path(path)


def read_curves_csv(path: Path) -> List[ClosureCurve]:
    """Curves in order of first appearance of each (model_id, layer)."""
    curves: Dict[Tuple[str, str], ClosureCurve] = {}
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CURVES_HEADER:
            raise ShapeMismatchError(f"{path} is not a closure curves file")
        for row in reader:
            key = (row["model_id"], row["layer"])
            curve = curves.setdefault(key, ClosureCurve(key[0], key[1], []))
            curve.points.append(
                CurvePoint(
                    edge_length=int(row["edge_length"]),
                    mean=float(row["mean_C"]),
                    ci_lo=_parse(row["ci_lo"]),
                    ci_hi=_parse(row["ci_hi"]),
                    n=int(row["n"]),
                )
            )
    return list(curves.values())
