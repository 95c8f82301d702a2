"""
Statistics behind the closure comparisons: fixed-effects two-way ANOVA, one-sample
t-test and the F / Student-t distribution functions their p-values need.

Distribution functions go through the regularized incomplete beta function, evaluated
with the modified Lentz continued fraction. Everything here is pure and thread-safe.
"""

import math
from dataclasses import asdict, dataclass
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
import structlog

from .errors import DegenerateSampleError, DesignError

logger = structlog.get_logger(__name__)

_CF_MAX_ITER = 10_000
_CF_EPS = 1e-15
_CF_TINY = 1e-300


# Special functions ------------------------------------------------------


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError(f"betainc requires a, b > 0 (got a={a}, b={b})")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"betainc requires 0 <= x <= 1 (got {x})")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_continued_fraction(a, b, x) / a
    return 1.0 - math.exp(log_front) * _beta_continued_fraction(b, a, 1.0 - x) / b


def _check_df(*dfs: float) -> None:
    for df in dfs:
        if not df >= 1:
            raise ValueError(f"degrees of freedom must be >= 1 (got {df})")


def f_cdf(x: float, d1: float, d2: float) -> float:
    _check_df(d1, d2)
    if x < 0:
        raise ValueError(f"F distribution is defined for x >= 0 (got {x})")
    if math.isinf(x):
        return 1.0
    return betainc_regularized(d1 / 2.0, d2 / 2.0, d1 * x / (d1 * x + d2))


def f_sf(x: float, d1: float, d2: float) -> float:
    """Upper tail P(F > x), computed directly so tiny p-values keep their precision."""
    _check_df(d1, d2)
    if x < 0:
        raise ValueError(f"F distribution is defined for x >= 0 (got {x})")
    if math.isinf(x):
        return 0.0
    return betainc_regularized(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * x))


def t_cdf(x: float, df: float) -> float:
    _check_df(df)
    if math.isinf(x):
        return 1.0 if x > 0 else 0.0
    tail = 0.5 * betainc_regularized(df / 2.0, 0.5, df / (df + x * x))
    return 1.0 - tail if x >= 0 else tail


def t_sf_two_sided(t: float, df: float) -> float:
    _check_df(df)
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


def t_ppf(p: float, df: float, tol: float = 1e-12) -> float:
    """Inverse of `t_cdf` by bisection."""
    _check_df(df)
    if not 0.0 < p < 1.0:
        raise ValueError(f"t_ppf requires 0 < p < 1 (got {p})")
    if p == 0.5:
        return 0.0
    lo, hi = -1.0, 1.0
    while t_cdf(lo, df) > p:
        lo *= 2.0
    while t_cdf(hi, df) < p:
        hi *= 2.0
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


# ANOVA ------------------------------------------------------------------


@dataclass
class EffectRow:
    name: str
    df1: int
    df2: int
    ss: float
    ms: float
    f: Optional[float]
    p: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResidualRow:
    df: int
    ss: float
    ms: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AnovaTable:
    effects: Dict[str, EffectRow]
    residual: ResidualRow
    total_ss: float
    n: int
    levels: Dict[str, List[str]]
    balanced: bool
    method: str = "balanced"
    zero_residual: bool = False

    def __getitem__(self, name: str) -> EffectRow:
        return self.effects[name]

    def to_dict(self) -> dict:
        return {
            "effects": {k: v.to_dict() for k, v in self.effects.items()},
            "residual": self.residual.to_dict(),
            "total_ss": self.total_ss,
            "n": self.n,
            "levels": self.levels,
            "balanced": self.balanced,
            "method": self.method,
            "zero_residual": self.zero_residual,
        }


ANOVA_EFFECTS = ("model", "edge_length", "interaction")


def _effect(name: str, ss: float, df1: int, residual: ResidualRow, zero_residual: bool) -> EffectRow:
    ms = ss / df1
    if zero_residual:
        return EffectRow(name, df1, residual.df, ss, ms, None, None)
    f = ms / residual.ms
    return EffectRow(name, df1, residual.df, ss, ms, f, f_sf(max(f, 0.0), df1, residual.df))


def _rss(design: np.ndarray, y: np.ndarray) -> float:
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return float(resid @ resid)


def anova_two_way(
    values: Sequence[Tuple[Hashable, Hashable, float]], allow_unbalanced: bool = False
) -> AnovaTable:
    """Fixed-effects two-way ANOVA of (model level, edge level, value) observations.

    Unbalanced designs are rejected unless `allow_unbalanced`, in which case sequential
    (Type I) sums of squares are used in the order model, edge length, interaction.
    """
    if not values:
        raise DesignError("no observations")
    a_levels = list(dict.fromkeys(v[0] for v in values))
    b_levels = list(dict.fromkeys(v[1] for v in values))
    for name, levels in (("model", a_levels), ("edge_length", b_levels)):
        if len(levels) < 2:
            raise DesignError(f"factor '{name}' has a single level {levels}")
    a_index = {lvl: i for i, lvl in enumerate(a_levels)}
    b_index = {lvl: j for j, lvl in enumerate(b_levels)}
    ai = np.array([a_index[v[0]] for v in values])
    bj = np.array([b_index[v[1]] for v in values])
    y = np.array([float(v[2]) for v in values], dtype=np.float64)
    a, b, n_total = len(a_levels), len(b_levels), len(y)

    counts = np.zeros((a, b), dtype=int)
    np.add.at(counts, (ai, bj), 1)
    if (counts == 0).any():
        empty = [(a_levels[i], b_levels[j]) for i, j in zip(*np.nonzero(counts == 0))]
        raise DesignError(f"empty cells in design: {empty[:5]}")
    balanced = bool((counts == counts[0, 0]).all())
    if not balanced and not allow_unbalanced:
        raise DesignError(
            f"unbalanced design (cell sizes {counts.min()}..{counts.max()}); "
            "pass allow_unbalanced=True for sequential sums of squares"
        )

    df_res = n_total - a * b
    if df_res < 1:
        raise DesignError("no residual degrees of freedom: need more than one observation per cell")

    sums = np.zeros((a, b))
    np.add.at(sums, (ai, bj), y)
    cell_means = sums / counts
    grand = float(y.mean())
    total_ss = float(((y - grand) ** 2).sum())
    ss_res = float(((y - cell_means[ai, bj]) ** 2).sum())

    if balanced:
        r = counts[0, 0]
        row_means = cell_means.mean(axis=1)
        col_means = cell_means.mean(axis=0)
        ss_a = float(b * r * ((row_means - grand) ** 2).sum())
        ss_b = float(a * r * ((col_means - grand) ** 2).sum())
        inter = cell_means - row_means[:, None] - col_means[None, :] + grand
        ss_ab = float(r * (inter ** 2).sum())
        method = "balanced"
    else:
        logger.warning("anova_unbalanced", cells=counts.tolist(), method="type1")
        ones = np.ones((n_total, 1))
        da = np.eye(a)[ai][:, 1:]
        db = np.eye(b)[bj][:, 1:]
        dab = np.einsum("ni,nj->nij", da, db).reshape(n_total, -1)
        rss0 = _rss(ones, y)
        rss_a = _rss(np.hstack([ones, da]), y)
        rss_ab_main = _rss(np.hstack([ones, da, db]), y)
        ss_a, ss_b = rss0 - rss_a, rss_a - rss_ab_main
        ss_ab = rss_ab_main - ss_res
        method = "type1"

    zero_residual = ss_res <= 1e-12 * max(total_ss, 1e-300)
    residual = ResidualRow(df=df_res, ss=ss_res, ms=ss_res / df_res)
    if zero_residual:
        logger.warning("anova_zero_residual", n=n_total, note="F and p undefined")
    effects = {
        "model": _effect("model", ss_a, a - 1, residual, zero_residual),
        "edge_length": _effect("edge_length", ss_b, b - 1, residual, zero_residual),
        "interaction": _effect("interaction", ss_ab, (a - 1) * (b - 1), residual, zero_residual),
    }
    return AnovaTable(
        effects=effects,
        residual=residual,
        total_ss=total_ss,
        n=n_total,
        levels={"model": [str(x) for x in a_levels], "edge_length": [str(x) for x in b_levels]},
        balanced=balanced,
        method=method,
        zero_residual=zero_residual,
    )


# t-test -----------------------------------------------------------------


@dataclass
class TTestResult:
    t: float
    df: int
    p_two_sided: float
    mean: float
    stderr: float
    n: int
    mu0: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def t_test_one_sample(xs: Sequence[float], mu0: float = 0.0) -> TTestResult:
    data = np.asarray(xs, dtype=np.float64)
    n = data.size
    if n < 2:
        raise DegenerateSampleError(f"t-test needs at least 2 observations (got {n})")
    if np.ptp(data) == 0:
        raise DegenerateSampleError("t-test sample has zero variance")
    mean = math.fsum(data.tolist()) / n
    var = math.fsum(((data - mean) ** 2).tolist()) / (n - 1)
    stderr = math.sqrt(var / n)
    t = (mean - mu0) / stderr
    return TTestResult(
        t=t,
        df=n - 1,
        p_two_sided=min(1.0, t_sf_two_sided(t, n - 1)),
        mean=mean,
        stderr=stderr,
        n=n,
        mu0=mu0,
    )
