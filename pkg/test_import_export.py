"""
Unit tests for the import_export module.
Tests correspondence files, colored clouds and the CSV tables.

Run with: pytest test_import_export.py -v
"""
import matplotlib
import numpy as np
import pytest

from import_export import METRICS_COLUMNS, TRACE_COLUMNS, ResultExporter
from refine import TraceRow
from storage import CloudFormatError, read_xyz
from train import EpochLog


class TestCorrespondenceFiles:
    """Tests for `i j [score]` files."""

    def test_round_trip_with_scores(self, tmp_path):
        path = str(tmp_path / "corr.txt")
        ResultExporter.export_correspondence([2, 0, 1], path, scores=[0.5, 0.25, 1.0])
        with open(path, encoding='utf-8') as f:
            assert f.readline() == "0 2 0.500000\n"
        np.testing.assert_array_equal(ResultExporter.import_correspondence(path, 3), [2, 0, 1])

    def test_rows_in_any_order(self, tmp_path):
        path = tmp_path / "corr.txt"
        path.write_text("# i j\n1 4\n0 3\n", encoding='utf-8')
        np.testing.assert_array_equal(ResultExporter.import_correspondence(str(path)), [3, 4])

    def test_duplicate_source(self, tmp_path):
        path = tmp_path / "corr.txt"
        path.write_text("0 1\n0 2\n", encoding='utf-8')
        with pytest.raises(CloudFormatError, match="twice"):
            ResultExporter.import_correspondence(str(path))

    def test_gap(self, tmp_path):
        path = tmp_path / "corr.txt"
        path.write_text("0 1\n2 2\n", encoding='utf-8')
        with pytest.raises(CloudFormatError):
            ResultExporter.import_correspondence(str(path))

    def test_wrong_count(self, tmp_path):
        path = tmp_path / "corr.txt"
        path.write_text("0 1\n1 0\n", encoding='utf-8')
        with pytest.raises(CloudFormatError):
            ResultExporter.import_correspondence(str(path), n_source=3)

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "corr.txt"
        path.write_text("0 1\nzero one\n", encoding='utf-8')
        with pytest.raises(CloudFormatError, match=":2:"):
            ResultExporter.import_correspondence(str(path))


class TestColoredExport:
    """Tests for visual inspection clouds."""

    def test_colors_in_unit_range(self):
        pts = np.random.default_rng(0).standard_normal((30, 3))
        colors = ResultExporter.correspondence_colors(pts)
        assert colors.shape == (30, 3)
        assert colors.min() >= 0.0 and colors.max() <= 1.0

    def test_identity_match_follows_index_ramp(self, tmp_path):
        target = np.random.default_rng(1).standard_normal((8, 3))
        src, tgt = str(tmp_path / "src.xyz"), str(tmp_path / "tgt.xyz")
        ResultExporter.export_colored(target, target, np.arange(8), src, tgt)
        ramp = matplotlib.colormaps['hsv'](np.arange(8) / 8)[:, :3]
        np.testing.assert_allclose(np.loadtxt(src)[:, 3:], ramp, atol=1e-4)
        np.testing.assert_allclose(np.loadtxt(tgt)[:, 3:], ramp, atol=1e-4)

    def test_single_point(self):
        assert ResultExporter.correspondence_colors(np.zeros((1, 3))).shape == (1, 3)

    def test_source_takes_matched_color(self, tmp_path):
        target = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
        src, tgt = str(tmp_path / "src.xyz"), str(tmp_path / "tgt.xyz")
        ResultExporter.export_colored(target + 5.0, target, [2, 2, 0], src, tgt)
        src_rows = np.loadtxt(src)
        tgt_rows = np.loadtxt(tgt)
        assert src_rows.shape == (3, 6)
        np.testing.assert_allclose(src_rows[:, 3:], tgt_rows[[2, 2, 0], 3:])
        np.testing.assert_allclose(read_xyz(src).points, target + 5.0)


class TestTables:
    """Tests for trace and metrics CSV files."""

    def test_trace(self, tmp_path):
        path = str(tmp_path / "trace.csv")
        rows = [TraceRow(0, 3.0, 1.0, 0.1, 1.0), TraceRow(1, 2.5, 0.8, 0.1, 0.7)]
        ResultExporter.export_trace(rows, path)
        frame = ResultExporter.load_trace(path)
        assert list(frame.columns) == TRACE_COLUMNS
        assert frame['total'].tolist() == [3.0, 2.5]

    def test_metrics_with_missing_validation(self, tmp_path):
        path = str(tmp_path / "metrics.csv")
        ResultExporter.export_metrics([EpochLog(1, 2.0, 1.5, 0.5, float('nan'), float('nan'), 3e-4)], path)
        frame = ResultExporter.load_metrics(path)
        assert list(frame.columns) == METRICS_COLUMNS
        assert frame['val_acc_001'].isna().all()
        assert frame['lr'][0] == pytest.approx(3e-4)

    def test_missing_column(self, tmp_path):
        path = tmp_path / "trace.csv"
        path.write_text("step,total\n0,1.0\n", encoding='utf-8')
        with pytest.raises(ValueError, match="missing"):
            ResultExporter.load_trace(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ResultExporter.load_metrics(str(tmp_path / "absent.csv"))
