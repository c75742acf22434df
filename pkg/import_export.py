"""
Import/Export module for correspondence results.
Writes correspondence files, colored point clouds for visual inspection,
refinement loss traces and training metrics, and reads correspondences back.
"""
import csv
import os
from typing import Iterable, Optional, Sequence

import matplotlib
import numpy as np
import pandas as pd

from geometry import PointCloud
from storage import CloudFormatError, atomic_write

TRACE_COLUMNS = ['step', 'total', 'cd_cross', 'cd_self', 'map']
METRICS_COLUMNS = ['epoch', 'loss_total', 'loss_cons', 'loss_map', 'val_acc_001', 'val_acc_005', 'lr']


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


class ResultExporter:
    """Handles exporting and importing correspondence results."""

    @staticmethod
    def export_correspondence(match: Sequence[int], filepath: str, scores: Optional[Sequence[float]] = None) -> None:
        """
        Write one `i j` line per source point, with the similarity as a third
        column when scores are given.

        Raises:
            IOError: If file cannot be written
        """
        match = np.asarray(match, dtype=np.int64)

        def write(f):
            writer = csv.writer(f, delimiter=' ', lineterminator='\n')
            for i, j in enumerate(match):
                row = [i, int(j)]
                if scores is not None:
                    row.append('%.6f' % scores[i])
                writer.writerow(row)

        atomic_write(filepath, write)

    @staticmethod
    def import_correspondence(filepath: str, n_source: Optional[int] = None) -> np.ndarray:
        """
        Read a correspondence file back into a match array.

        Rows may come in any order but every source index must appear once.

        Raises:
            CloudFormatError: on malformed lines, duplicates or gaps
        """
        pairs = {}
        with open(filepath, 'r', encoding='utf-8') as f:
            for line_num, raw in enumerate(f, start=1):
                text = raw.strip()
                if not text or text.startswith('#'):
                    continue
                parts = text.split()
                try:
                    i, j = int(parts[0]), int(parts[1])
                except (ValueError, IndexError):
                    raise CloudFormatError(filepath, line_num, f"expected 'i j [score]', got {text!r}")
                if i in pairs:
                    raise CloudFormatError(filepath, line_num, f"source index {i} listed twice")
                if i < 0 or j < 0:
                    raise CloudFormatError(filepath, line_num, "indices must be non-negative")
                pairs[i] = j
        n = n_source if n_source is not None else len(pairs)
        if sorted(pairs) != list(range(n)):
            raise CloudFormatError(filepath, max(1, len(pairs)), f"expected source indices 0..{n - 1}")
        return np.array([pairs[i] for i in range(n)], dtype=np.int64)

    @staticmethod
    def correspondence_colors(target) -> np.ndarray:
        """RGB in [0, 1] for target index j from a fixed hsv ramp at j / n."""
        n = len(_points(target))
        return matplotlib.colormaps['hsv'](np.arange(n) / n)[:, :3]

    @staticmethod
    def export_colored(source, target, match: Sequence[int], src_path: str, tgt_path: str) -> None:
        """
        Write 6-column `x y z r g b` clouds: the target colored by index and
        each source point carrying the color of its matched target point.
        """
        colors = ResultExporter.correspondence_colors(target)
        match = np.asarray(match, dtype=np.int64)
        for pts, rgb, path in ((_points(target), colors, tgt_path), (_points(source), colors[match], src_path)):
            def write(f, pts=pts, rgb=rgb):
                writer = csv.writer(f, delimiter=' ', lineterminator='\n')
                for p, c in zip(pts, rgb):
                    writer.writerow(['%.8f' % v for v in p] + ['%.4f' % v for v in c])
            atomic_write(path, write)

    @staticmethod
    def export_trace(rows: Iterable, filepath: str) -> None:
        """Write a refinement trace as CSV `step,total,cd_cross,cd_self,map`."""
        def write(f):
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(TRACE_COLUMNS)
            for r in rows:
                writer.writerow([r.step] + ['%.10g' % getattr(r, c) for c in TRACE_COLUMNS[1:]])
        atomic_write(filepath, write)

    @staticmethod
    def export_metrics(log: Iterable, filepath: str) -> None:
        """Write the per-epoch training log as CSV."""
        def write(f):
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(METRICS_COLUMNS)
            for e in log:
                writer.writerow([e.epoch] + ['%.10g' % getattr(e, c) for c in METRICS_COLUMNS[1:]])
        atomic_write(filepath, write)

    @staticmethod
    def load_table(filepath: str, columns: Sequence[str]) -> pd.DataFrame:
        """
        Read a trace or metrics CSV.

        Raises:
            ValueError: If a required column is missing
        """
        if not os.path.exists(filepath):
            raise FileNotFoundError(filepath)
        frame = pd.read_csv(filepath)
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise ValueError(f"{filepath} is missing column(s) {missing}")
        return frame

    @staticmethod
    def load_trace(filepath: str) -> pd.DataFrame:
        return ResultExporter.load_table(filepath, TRACE_COLUMNS)

    @staticmethod
    def load_metrics(filepath: str) -> pd.DataFrame:
        return ResultExporter.load_table(filepath, METRICS_COLUMNS)
