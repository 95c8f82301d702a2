import pytest

from gestaltclosure.core.closure import ClosureCurve, closure_curve, curves_by_model, write_curves_csv
from gestaltclosure.core.errors import EmptyPlotError
from gestaltclosure.core.report import build_figure, curve_label, emit_plots

from .conftest import edge_pattern, make_records


@pytest.fixture
def curves():
    records = make_records("Natural", edge_pattern(0.01, noise=0.02)) + make_records(
        "ShuffledPixels", edge_pattern(0.0, noise=0.02)
    )
    return list(curves_by_model(records, ci="t").values())


def test_figure_has_one_line_per_curve(curves):
    fig = build_figure(curves, title="ablation")
    ax = fig.axes[0]
    assert [t.get_text() for t in ax.get_legend().get_texts()] == ["Natural", "ShuffledPixels"]
    assert [int(t) for t in ax.get_xticks()] == [3, 8, 13, 18, 24, 29]
    assert ax.get_title() == "ablation"


def test_layer_labels_for_a_single_model():
    records = make_records("m", edge_pattern(0.01), layer="conv2d_1") + make_records(
        "m", edge_pattern(0.02), layer="fc_finale"
    )
    curves = list(curves_by_model(records, ci="t").values())
    assert [curve_label(c, curves) for c in curves] == ["conv2d_1", "fc_finale"]


def test_curve_without_interval_is_still_drawn():
    curve = closure_curve(make_records("m", edge_pattern(0.01), per_edge=1))
    assert build_figure([curve]).axes[0].lines


def test_nothing_to_plot():
    with pytest.raises(EmptyPlotError):
        build_figure([])
    with pytest.raises(EmptyPlotError):
        build_figure([ClosureCurve("m", "fc_finale", [])])
    with pytest.raises(EmptyPlotError):
        emit_plots([], "unused")


def test_svg_output_is_byte_deterministic(curves, tmp_path):
    source = write_curves_csv(curves, tmp_path / "curves.csv")
    first = emit_plots([source], tmp_path / "a")
    second = emit_plots([source], tmp_path / "b")
    assert [p.name for p in first] == ["curves.svg"]
    assert first[0].read_bytes() == second[0].read_bytes()
    assert first[0].read_text().lstrip().startswith("<?xml")


def test_result_directories_are_named_after_their_run(curves, tmp_path):
    for name in ("white_noise", "untrained"):
        (tmp_path / name).mkdir()
        write_curves_csv(curves, tmp_path / name / "curves.csv")
    written = emit_plots([tmp_path / "white_noise", tmp_path / "untrained"], tmp_path / "plots")
    assert [p.name for p in written] == ["white_noise_curves.svg", "untrained_curves.svg"]
    assert all(p.exists() for p in written)
