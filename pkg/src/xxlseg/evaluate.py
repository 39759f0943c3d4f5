"""Segment correlation matrix, main-diagonal statistics and their exports."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .labels import connected_components, segment_table

DEFAULT_MIN_SEGMENT_VOXELS = 100


def compute_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two voxel sets given as boolean masks of equal shape."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("IoU of an empty segment is undefined")
    inter = np.count_nonzero(a & b)
    return inter / (np.count_nonzero(a) + np.count_nonzero(b) - inter)


@dataclass
class CorrelationMatrix:
    reference_labels: list[int]
    detected_labels: list[int]
    iou: np.ndarray
    ref_voxel_counts: list[int]
    det_voxel_counts: list[int]
    diagonal_assignment: list[int | None]  # column index per row

    @property
    def shape(self) -> tuple[int, int]:
        return self.iou.shape

    def diagonal(self) -> np.ndarray:
        """IoU of each row's assigned column, 0 for unmatched rows."""
        return np.array(
            [self.iou[i, j] if j is not None else 0.0 for i, j in enumerate(self.diagonal_assignment)],
            dtype=np.float64,
        )


def _overlaps(reference: np.ndarray, proposal: np.ndarray):
    both = (reference != 0) & (proposal != 0)
    r = reference[both].astype(np.int64)
    p = proposal[both].astype(np.int64)
    width = np.int64(p.max()) + 1 if p.size else np.int64(1)
    codes, counts = np.unique(r * width + p, return_counts=True)
    return codes // width, codes % width, counts


def build_correlation_matrix(
    reference: np.ndarray,
    proposal: np.ndarray,
    min_segment_voxels: int = DEFAULT_MIN_SEGMENT_VOXELS,
) -> CorrelationMatrix:
    """Reference x detected IoU matrix in the challenge's ordering.

    Segments with fewer than ``min_segment_voxels`` voxels are dropped on both
    sides. Rows run from the largest reference segment down (ties: smaller
    label). Walking the rows in that order, each row claims the unclaimed
    detected segment with the highest positive IoU (ties: smaller label); the
    claimed columns come first in row order, then all unclaimed detected
    segments by voxel count descending.
    """
    reference = np.asarray(reference)
    proposal = np.asarray(proposal)
    if reference.shape != proposal.shape:
        raise ValueError(f"dims mismatch: reference {reference.shape}, proposal {proposal.shape}")
    if min_segment_voxels < 0:
        raise ValueError("min_segment_voxels must be non-negative")

    ref_counts = {k: v for k, v in segment_table(reference).counts().items() if v >= min_segment_voxels}
    det_counts = {k: v for k, v in segment_table(proposal).counts().items() if v >= min_segment_voxels}
    rows = sorted(ref_counts, key=lambda k: (-ref_counts[k], k))

    inter = {}
    for r, p, c in zip(*_overlaps(reference, proposal)):
        r, p = int(r), int(p)
        if r in ref_counts and p in det_counts:
            inter.setdefault(r, {})[p] = int(c)

    def iou(r, p, c):
        return c / (ref_counts[r] + det_counts[p] - c)

    claimed = {}
    row_match = []
    for r in rows:
        best = None
        for p, c in inter.get(r, {}).items():
            if p in claimed:
                continue
            cand = (-iou(r, p, c), p)
            if best is None or cand < best:
                best = cand
        if best is None:
            row_match.append(None)
        else:
            claimed[best[1]] = len(claimed)
            row_match.append(best[1])

    matched_cols = [p for p in row_match if p is not None]
    rest = sorted((p for p in det_counts if p not in claimed), key=lambda k: (-det_counts[k], k))
    cols = matched_cols + rest
    col_index = {p: j for j, p in enumerate(cols)}

    matrix = np.zeros((len(rows), len(cols)), dtype=np.float64)
    for i, r in enumerate(rows):
        for p, c in inter.get(r, {}).items():
            matrix[i, col_index[p]] = iou(r, p, c)

    return CorrelationMatrix(
        reference_labels=rows,
        detected_labels=cols,
        iou=matrix,
        ref_voxel_counts=[ref_counts[r] for r in rows],
        det_voxel_counts=[det_counts[p] for p in cols],
        diagonal_assignment=[col_index[p] if p is not None else None for p in row_match],
    )


def cc_postprocess_proposal(proposal: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Split every detected segment into its connected components."""
    return connected_components(proposal, connectivity)


@dataclass(frozen=True)
class GroupStats:
    maximum: float
    mean: float
    std: float

    def as_dict(self) -> dict:
        def clean(x):
            return None if math.isnan(x) else float(x)

        return {"max": clean(self.maximum), "mean": clean(self.mean), "std": clean(self.std)}


@dataclass(frozen=True)
class DiagonalStats:
    all: GroupStats
    large: GroupStats
    small: GroupStats

    def as_dict(self) -> dict:
        return {"all": self.all.as_dict(), "large": self.large.as_dict(), "small": self.small.as_dict()}


def _group(values: np.ndarray) -> GroupStats:
    if values.size == 0:
        return GroupStats(math.nan, math.nan, math.nan)
    return GroupStats(float(values.max()), float(values.mean()), float(values.std()))


def diagonal_stats(matrix: CorrelationMatrix | np.ndarray) -> DiagonalStats:
    """Max / mean / population std of the diagonal over all rows, the front
    half (first ceil(n/2) rows, the large segments) and the back half."""
    diag = matrix.diagonal() if isinstance(matrix, CorrelationMatrix) else np.asarray(matrix, dtype=np.float64)
    if diag.size == 0:
        raise ValueError("diagonal statistics need at least one reference row")
    half = (diag.size + 1) // 2
    return DiagonalStats(_group(diag), _group(diag[:half]), _group(diag[half:]))


def export_csv(matrix: CorrelationMatrix, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["reference"] + [str(p) for p in matrix.detected_labels])
        for r, row in zip(matrix.reference_labels, matrix.iou):
            writer.writerow([str(r)] + [f"{v:.6f}" for v in row])
    return path


def read_csv(path: str | os.PathLike) -> tuple[list[int], list[int], np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    cols = [int(c) for c in rows[0][1:]]
    refs = [int(r[0]) for r in rows[1:]]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    return refs, cols, values.reshape(len(refs), len(cols))


def heatmap_pixels(matrix: CorrelationMatrix) -> np.ndarray:
    return np.rint(matrix.iou * 255.0).astype(np.uint8)


def export_heatmap(matrix: CorrelationMatrix, path: str | os.PathLike) -> Path:
    """Binary PGM, one pixel per cell, row 0 at the top."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = heatmap_pixels(matrix)
    rows, cols = pixels.shape
    path.write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    cols, rows, maxval = map(int, fields[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    pos += 1
    return np.frombuffer(data[pos : pos + rows * cols], dtype=np.uint8).reshape(rows, cols)


def export_matrix(matrix: CorrelationMatrix, path: str | os.PathLike, format: str = "csv") -> Path:
    if format == "csv":
        return export_csv(matrix, path)
    if format in ("heatmap", "heatmap-image", "pgm"):
        return export_heatmap(matrix, path)
    raise ValueError(f"unknown export format {format!r}")


def export_stats(stats: DiagonalStats, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(stats.as_dict(), indent=2) + "\n")
    return path
