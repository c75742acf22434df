"""
Unit tests for the storage module.
Tests parsing edge cases, line-numbered errors and manifest handling.

Run with: pytest test_storage.py -v
"""
import os
import tempfile

import numpy as np
import pytest

from geometry import PointCloud
from storage import (CloudFormatError, atomic_write, read_gt, read_manifest, read_xyz,
                     write_gt, write_manifest, write_xyz)


@pytest.fixture
def temp_file():
    """Create a temporary file for testing."""
    fd, path = tempfile.mkstemp(suffix='.xyz')
    os.close(fd)
    yield path
    # Cleanup
    if os.path.exists(path):
        os.remove(path)


def write_text(path, text):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)


class TestXyz:
    """Tests for point-cloud text files."""

    def test_write_then_read(self, temp_file):
        """Coordinates survive with 8 decimals."""
        points = np.array([[0.123456789, -1.0, 2.5], [1e-9, 3.0, -4.25]])
        write_xyz(PointCloud(points), temp_file)
        np.testing.assert_allclose(read_xyz(temp_file).points, points, atol=1e-8)

    def test_format(self, temp_file):
        """Each line holds three space-separated values."""
        write_xyz(np.array([[1.0, 2.0, 3.0]]), temp_file)
        with open(temp_file, encoding='utf-8') as f:
            assert f.read() == "1.00000000 2.00000000 3.00000000\n"

    def test_comments_and_blank_lines(self, temp_file):
        """Comments and blank lines are skipped."""
        write_text(temp_file, "# header\n\n0 0 0\n  # indented comment\n1 2 3\n")
        np.testing.assert_array_equal(read_xyz(temp_file).points, [[0, 0, 0], [1, 2, 3]])

    def test_extra_columns_ignored(self, temp_file):
        """Color columns after xyz are ignored."""
        write_text(temp_file, "1 2 3 255 0 0\n")
        np.testing.assert_array_equal(read_xyz(temp_file).points, [[1, 2, 3]])

    def test_short_line_reports_line_number(self, temp_file):
        """A row with two values names its line."""
        write_text(temp_file, "0 0 0\n# note\n1 2\n")
        with pytest.raises(CloudFormatError) as info:
            read_xyz(temp_file)
        assert info.value.line == 3
        assert ":3:" in str(info.value)

    def test_non_numeric(self, temp_file):
        """Text in a coordinate column is rejected."""
        write_text(temp_file, "a b c\n")
        with pytest.raises(CloudFormatError, match="not a number"):
            read_xyz(temp_file)

    def test_non_finite(self, temp_file):
        """NaN and Inf are rejected."""
        write_text(temp_file, "0 0 0\nnan 0 0\n")
        with pytest.raises(CloudFormatError, match="finite"):
            read_xyz(temp_file)

    def test_empty_file(self, temp_file):
        """A file with no points is an error."""
        write_text(temp_file, "# nothing here\n")
        with pytest.raises(CloudFormatError, match="no points"):
            read_xyz(temp_file)

    def test_missing_file(self):
        """Missing files raise the usual OSError."""
        with pytest.raises(OSError):
            read_xyz("/nonexistent/cloud.xyz")


class TestGroundTruth:
    """Tests for ground-truth index files."""

    def test_write_then_read(self, temp_file):
        write_gt([2, 0, 1], temp_file)
        np.testing.assert_array_equal(read_gt(temp_file, 3), [2, 0, 1])

    def test_out_of_range(self, temp_file):
        """Indices must address the target."""
        write_text(temp_file, "0\n5\n")
        with pytest.raises(CloudFormatError) as info:
            read_gt(temp_file, 3)
        assert info.value.line == 2

    def test_negative(self, temp_file):
        write_text(temp_file, "-1\n")
        with pytest.raises(CloudFormatError):
            read_gt(temp_file)

    def test_not_an_integer(self, temp_file):
        write_text(temp_file, "1.5\n")
        with pytest.raises(CloudFormatError, match="integer"):
            read_gt(temp_file)


class TestManifest:
    """Tests for tab-separated pair manifests."""

    def test_relative_paths(self, tmp_path):
        """Paths are stored relative to the manifest and resolved on read."""
        src, tgt, gt = (str(tmp_path / name) for name in ("a.xyz", "b.xyz", "gt.txt"))
        manifest = str(tmp_path / "manifest.tsv")
        write_manifest([(src, tgt, gt), (src, tgt, None)], manifest)
        with open(manifest, encoding='utf-8') as f:
            assert f.readline() == "a.xyz\tb.xyz\tgt.txt\n"
            assert f.readline() == "a.xyz\tb.xyz\t-\n"
        rows = read_manifest(manifest)
        assert rows[0] == (os.path.normpath(src), os.path.normpath(tgt), os.path.normpath(gt))
        assert rows[1][2] is None

    def test_wrong_field_count(self, tmp_path):
        manifest = tmp_path / "manifest.tsv"
        manifest.write_text("a.xyz\tb.xyz\n", encoding='utf-8')
        with pytest.raises(CloudFormatError, match="3 tab-separated"):
            read_manifest(str(manifest))

    def test_missing_source(self, tmp_path):
        manifest = tmp_path / "manifest.tsv"
        manifest.write_text("-\tb.xyz\t-\n", encoding='utf-8')
        with pytest.raises(CloudFormatError):
            read_manifest(str(manifest))


class TestAtomicWrite:
    """Tests for the temp-file-and-rename writer."""

    def test_failure_leaves_old_file(self, tmp_path):
        """A writer that raises keeps the previous content and no temp files."""
        path = tmp_path / "cloud.xyz"
        path.write_text("0 0 0\n", encoding='utf-8')

        def broken(f):
            f.write("partial")
            raise RuntimeError("disk full")

        with pytest.raises(RuntimeError):
            atomic_write(str(path), broken)
        assert path.read_text(encoding='utf-8') == "0 0 0\n"
        assert os.listdir(tmp_path) == ["cloud.xyz"]

    def test_creates_directories(self, tmp_path):
        path = tmp_path / "nested" / "dir" / "gt.txt"
        write_gt([0], str(path))
        assert path.exists()
