import csv

import pytest

from cosmos.metrics import ReportRow, StudyReport
from cosmos.report import CSV_FIELDS, emit_report, iteration_of, read_csv, rows_to_csv, scatter_plot, trend_plot


def _report(method, vs, coch, assd=(1.0, 0.5)):
    rows = [ReportRow(method, "VS", vs, 0.01, assd[0], 0.1, 4),
            ReportRow(method, "cochlea", coch, 0.02, assd[1], 0.05, 4)]
    rows.append(ReportRow(method, "Mean", (vs + coch) / 2, 0.015, sum(assd) / 2, 0.075, 4))
    return StudyReport(method, rows)


def test_one_row_gives_header_plus_one_line(tmp_path):
    row = ReportRow("m", "VS", 0.5, 0.1, 1.0, 0.2, 3)
    paths = emit_report([row], tmp_path, "csv")
    lines = paths["csv"].read_text().splitlines()
    assert lines[0].split(",") == CSV_FIELDS and len(lines) == 2


def test_csv_round_trip_to_six_decimals(tmp_path):
    reports = [_report("source_only", 0.123456789, 0.987654321), _report("st1", 1 / 3, 2 / 3)]
    path = emit_report(reports, tmp_path, ["csv"])["csv"]
    back = read_csv(path)
    flat = [r for rep in reports for r in rep.rows]
    assert len(back) == len(flat)
    for a, b in zip(flat, back):
        assert (a.method, a.cls, a.n_cases) == (b.method, b.cls, b.n_cases)
        for f in ("dice_mean", "dice_std", "assd_mean", "assd_std"):
            assert round(getattr(a, f), 6) == getattr(b, f)


def test_read_csv_rejects_other_schemas(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="expected columns"):
        read_csv(p)


def test_trend_plot_has_three_points_per_class(tmp_path):
    reports = [_report("da_seg", 0.7, 0.6)] + [_report(f"st{k}", 0.7 + k / 100, 0.6 + k / 100) for k in (1, 2, 3)]
    series = trend_plot(reports, tmp_path / "t.svg")
    assert set(series) == {"VS", "cochlea", "Mean"}
    for pts in series.values():
        assert [k for k, _ in pts] == [1, 2, 3]
    svg = (tmp_path / "t.svg").read_text()
    assert svg.startswith("<?xml") and "<svg" in svg


def test_scatter_points_come_from_mean_rows(tmp_path):
    pts = scatter_plot([_report("a", 0.2, 0.4, (3.0, 1.0)), _report("b", 0.8, 0.6)], tmp_path / "s.svg")
    assert pts == {"a": pytest.approx((0.3, 2.0)), "b": pytest.approx((0.7, 0.75))}


def test_plots_are_reproducible(tmp_path):
    reps = [_report("st1", 0.5, 0.5), _report("st2", 0.6, 0.5)]
    a = emit_report(reps, tmp_path / "a", ["scatter", "trend"])
    b = emit_report(reps, tmp_path / "b", ["scatter", "trend"])
    for f in ("scatter", "trend"):
        assert a[f].read_bytes() == b[f].read_bytes()


def test_errors(tmp_path):
    with pytest.raises(ValueError, match="unknown report format"):
        emit_report([_report("a", 0.1, 0.1)], tmp_path, ["pdf"])
    with pytest.raises(ValueError):
        emit_report([], tmp_path)
    with pytest.raises(ValueError, match="iteration"):
        trend_plot([_report("source_only", 0.1, 0.1)], tmp_path / "t.svg")


@pytest.mark.parametrize("name,k", [("st3", 3), ("ST iter 2", 2), ("iter_1", 1), ("source_only", None),
                                    ("da_seg", None), ("test", None)])
def test_iteration_of(name, k):
    assert iteration_of(name) == k


def test_csv_is_plain_csv():
    text = rows_to_csv([ReportRow("a,b", "VS", 1, 0, 0, 0, 1)])
    rows = list(csv.reader(text.splitlines()))
    assert rows[1][0] == "a,b"
