import pytest

from evil_lab.errors import ContractError
from evil_lab.plotting import PlotSpec, emit_svg, read_csv, render_svg


def test_single_point_renders():
    svg = render_svg([{"x": "1", "y": "2"}], PlotSpec("x", ("y",)))
    assert svg.startswith("<svg") and "circle" in svg


def test_missing_column_named():
    with pytest.raises(ContractError, match="'acc'"):
        render_svg([{"x": "1"}], PlotSpec("x", ("acc",)))


def test_grouped_series_legend():
    rows = [{"t": str(i), "acc": str(i / 10), "v": v} for v in ("evil", "dense") for i in range(3)]
    svg = render_svg(rows, PlotSpec("t", ("acc",), group_by="v"))
    assert svg.count("<polyline") == 2 and "evil" in svg and "dense" in svg


def test_nan_points_dropped():
    rows = [{"x": "0", "y": "nan"}, {"x": "1", "y": "1"}, {"x": "2", "y": "3"}]
    assert "<polyline" in render_svg(rows, PlotSpec("x", ("y",)))


def test_emit_is_byte_identical(tmp_path):
    csv_path = tmp_path / "m.csv"
    csv_path.write_text("# comment\nx,y\n0,1\n1,0.5\n2,0.25\n")
    assert len(read_csv(csv_path)) == 3
    emit_svg(csv_path, PlotSpec("x", ("y",), title="t"), tmp_path / "a.svg")
    emit_svg(csv_path, PlotSpec("x", ("y",), title="t"), tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
