"""
Storage module for point-cloud pair persistence.
Handles the text formats: `.xyz` clouds, ground-truth index files and
tab-separated pair manifests. Every write goes through a temp file and a
rename so a crash never leaves a half-written file behind.
"""
import csv
import io
import os
import tempfile
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from geometry import PointCloud

XYZ_FORMAT = "%.8f"
MANIFEST_NAME = "manifest.tsv"
NO_GT = "-"


class CloudFormatError(ValueError):
    """A text file that does not parse; carries the 1-based line number."""

    def __init__(self, path: str, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class PairMismatchError(ValueError):
    """Source, target and ground truth disagree on the number of points."""


def atomic_write(path: str, write: Callable[[io.TextIOBase], None]) -> None:
    """
    Write a text file via a temp file in the same directory, then rename.

    Args:
        path: destination path; parent directories are created
        write: callback receiving the open text stream

    Raises:
        IOError: If the directory or file cannot be written
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as f:
            write(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _data_lines(path: str):
    """Yield (line number, stripped text) for non-blank, non-comment lines."""
    with open(path, "r", encoding="utf-8") as f:
        for line_num, raw in enumerate(f, start=1):
            text = raw.strip()
            if text and not text.startswith("#"):
                yield line_num, text


def write_xyz(cloud, path: str) -> None:
    """
    Save a cloud as whitespace-separated `x y z` lines.

    Args:
        cloud: PointCloud or n x 3 array
        path: destination file
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)

    def write(f):
        writer = csv.writer(f, delimiter=" ", lineterminator="\n")
        for p in points:
            writer.writerow([XYZ_FORMAT % c for c in p])

    atomic_write(path, write)


def read_xyz(path: str) -> PointCloud:
    """
    Load an `.xyz` cloud. Lines starting with '#' are comments; columns past
    the third (colors) are ignored.

    Raises:
        CloudFormatError: on a malformed or non-finite row, or an empty file
        IOError: If the file cannot be read
    """
    rows = []
    for line_num, text in _data_lines(path):
        parts = text.split()
        if len(parts) < 3:
            raise CloudFormatError(path, line_num, f"expected 3 coordinates, found {len(parts)}")
        try:
            xyz = [float(v) for v in parts[:3]]
        except ValueError:
            raise CloudFormatError(path, line_num, f"not a number in {text!r}")
        if not np.all(np.isfinite(xyz)):
            raise CloudFormatError(path, line_num, "coordinates must be finite")
        rows.append(xyz)
    if not rows:
        raise CloudFormatError(path, 1, "file contains no points")
    return PointCloud(np.array(rows))


def write_gt(gt: Sequence[int], path: str) -> None:
    """Save a ground-truth map, one decimal target index per line."""
    atomic_write(path, lambda f: f.writelines(f"{int(j)}\n" for j in gt))


def read_gt(path: str, n_target: Optional[int] = None) -> np.ndarray:
    """
    Load a ground-truth map.

    Args:
        path: file with one target index per line
        n_target: when given, every index must lie in [0, n_target)

    Raises:
        CloudFormatError: on a non-integer or out-of-range index
    """
    indices = []
    for line_num, text in _data_lines(path):
        try:
            j = int(text)
        except ValueError:
            raise CloudFormatError(path, line_num, f"not an integer index: {text!r}")
        if j < 0 or (n_target is not None and j >= n_target):
            raise CloudFormatError(path, line_num, f"index {j} outside [0, {n_target})")
        indices.append(j)
    return np.array(indices, dtype=np.int64)


def write_manifest(rows: Sequence[Tuple[str, str, Optional[str]]], path: str) -> None:
    """
    Save a pair manifest: `src<TAB>tgt<TAB>gt` per line, '-' for no ground truth.
    Paths are written relative to the manifest's directory when possible.
    """
    base = os.path.dirname(os.path.abspath(path))

    def rel(p):
        return os.path.relpath(os.path.abspath(p), base) if p else NO_GT

    def write(f):
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        for src, tgt, gt in rows:
            writer.writerow([rel(src), rel(tgt), rel(gt)])

    atomic_write(path, write)


def read_manifest(path: str) -> List[Tuple[str, str, Optional[str]]]:
    """
    Load a manifest, resolving relative paths against its directory.

    Raises:
        CloudFormatError: on a row without exactly three tab-separated fields
    """
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    for line_num, text in _data_lines(path):
        parts = text.split("\t")
        if len(parts) != 3:
            raise CloudFormatError(path, line_num, f"expected 3 tab-separated fields, found {len(parts)}")
        src, tgt, gt = (os.path.normpath(os.path.join(base, p)) if p != NO_GT else None for p in parts)
        if src is None or tgt is None:
            raise CloudFormatError(path, line_num, "source and target paths are required")
        rows.append((src, tgt, gt))
    return rows
