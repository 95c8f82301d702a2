"""
SVG closure plots: edge length against mean closure, one line per condition or layer,
with the confidence interval drawn as a shaded band.
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import structlog  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from .closure import ClosureCurve, read_curves_csv  # noqa: E402
from .errors import EmptyPlotError  # noqa: E402

logger = structlog.get_logger(__name__)

STYLE: Dict[str, object] = {
    "palette": ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"],
    "band_alpha": 0.2,
    "line_width": 1.8,
    "marker": "o",
    "grid": "#dddddd",
    "figsize": (6.0, 4.0),
}

RC = {
    "svg.hashsalt": "gestaltclosure",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 10,
}


def curve_label(curve: ClosureCurve, curves: Sequence[ClosureCurve]) -> str:
    models = {c.model_id for c in curves}
    layers = {c.layer_name for c in curves}
    if len(models) == 1 and len(layers) > 1:
        return curve.layer_name
    if len(layers) == 1:
        return curve.model_id
    return f"{curve.model_id}:{curve.layer_name}"


def build_figure(curves: Sequence[ClosureCurve], title: Optional[str] = None) -> Figure:
    """Line chart of the curves in the given order (which is also the legend order)."""
    if not curves or not any(c.points for c in curves):
        raise EmptyPlotError("no closure curves to plot")
    palette: List[str] = STYLE["palette"]  # type: ignore[assignment]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=STYLE["figsize"])
        ticks = sorted({p.edge_length for c in curves for p in c.points})
        for i, curve in enumerate(curves):
            color = palette[i % len(palette)]
            xs = [p.edge_length for p in curve.points]
            ax.plot(
                xs,
                curve.means,
                color=color,
                lw=STYLE["line_width"],
                marker=STYLE["marker"],
                ms=4,
                label=curve_label(curve, curves),
            )
            banded = [p for p in curve.points if p.ci_lo is not None and p.ci_hi is not None]
            if banded:
                ax.fill_between(
                    [p.edge_length for p in banded],
                    [p.ci_lo for p in banded],
                    [p.ci_hi for p in banded],
                    color=color,
                    alpha=STYLE["band_alpha"],
                    lw=0,
                )
        ax.axhline(0.0, color="#888888", lw=0.8, ls="--")
        ax.set_xticks(ticks)
        ax.set_xlabel("Edge length (px)")
        ax.set_ylabel("Mean closure")
        ax.grid(True, color=STYLE["grid"], lw=0.6)
        ax.legend(loc="best", frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
    return fig


def save_svg(fig: Figure, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(RC):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _resolve(path: Path) -> Path:
    path = Path(path)
    return path / "curves.csv" if path.is_dir() else path


def emit_plots(inputs: Sequence[Path], out_dir: Path) -> List[Path]:
    """One SVG per curves CSV (a result directory stands for its curves.csv)."""
    sources = [_resolve(p) for p in inputs]
    if not sources:
        raise EmptyPlotError("no curve files given")
    stems = [s.stem for s in sources]
    written = []
    for source in sources:
        curves = read_curves_csv(source)
        if not curves:
            raise EmptyPlotError(f"{source} holds no curves")
        name = source.stem if stems.count(source.stem) == 1 else f"{source.parent.name}_{source.stem}"
        fig = build_figure(curves, title=source.parent.name or None)
        written.append(save_svg(fig, Path(out_dir) / f"{name}.svg"))
        logger.info("plot_written", source=str(source), curves=len(curves), path=str(written[-1]))
    return written
