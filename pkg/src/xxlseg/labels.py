"""Operations on label volumes: connected components, segment tables, morphology."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph

from ._threads import thread_map
from .volume import scan_order_index


def _half_offsets(connectivity: int) -> list[tuple[int, int, int]]:
    """One offset from each +/- pair of the neighbourhood."""
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    offsets = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                off = (dx, dy, dz)
                if off == (0, 0, 0):
                    continue
                if connectivity == 6 and sum(map(abs, off)) != 1:
                    continue
                if off > (0, 0, 0):
                    offsets.append(off)
    return offsets


def _shift_slices(off, shape):
    """Slices selecting voxel pairs (v, v + off) that both lie inside ``shape``."""
    src, dst = [], []
    for d, n in zip(off, shape):
        if d >= 0:
            src.append(slice(0, n - d))
            dst.append(slice(d, n))
        else:
            src.append(slice(-d, n))
            dst.append(slice(0, n + d))
    return tuple(src), tuple(dst)


def structuring_element(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(labels: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Split every label into its maximal connected pieces.

    Output labels are consecutive from 1 in order of each component's first
    voxel in x-fastest scan order. Background stays 0.
    """
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return connected_components(labels[:, :, None], connectivity)[:, :, 0]
    shape = labels.shape
    n = labels.size
    out = np.zeros(shape, dtype=np.uint32)
    fg = labels != 0
    if not fg.any():
        return out

    index = scan_order_index(shape)
    rows, cols = [], []
    for off in _half_offsets(connectivity):
        src, dst = _shift_slices(off, shape)
        a = labels[src]
        same = (a == labels[dst]) & (a != 0)
        rows.append(index[src][same])
        cols.append(index[dst][same])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    graph = sparse.coo_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n, n))
    _, comp = csgraph.connected_components(graph.tocsr(), directed=False)

    fg_scan = np.sort(index[fg])
    fg_comp = comp[fg_scan]
    uniq, first = np.unique(fg_comp, return_index=True)
    order = np.argsort(first, kind="stable")
    new_id = np.empty(uniq.size, dtype=np.uint32)
    new_id[order] = np.arange(1, uniq.size + 1, dtype=np.uint32)
    out_flat = np.zeros(n, dtype=np.uint32)
    out_flat[fg_scan] = new_id[np.searchsorted(uniq, fg_comp)]
    return out_flat.reshape(shape, order="F")


def count_segments(labels: np.ndarray) -> int:
    values = np.unique(labels)
    return int(np.count_nonzero(values))


@dataclass(frozen=True)
class SegmentInfo:
    voxel_count: int
    bbox_min: tuple[int, int, int]
    bbox_max: tuple[int, int, int]


@dataclass(frozen=True)
class SegmentReport:
    segments: int
    min_size: int | None
    max_size: int | None
    median_size: int | None
    foreground_percent: float

    def as_dict(self) -> dict:
        return {
            "segments": self.segments,
            "min_segment_size": self.min_size,
            "max_segment_size": self.max_size,
            "median_segment_size": self.median_size,
            "foreground_percent": self.foreground_percent,
        }


class SegmentTable(dict):
    """``label -> SegmentInfo`` plus the voxel total of the source volume."""

    def __init__(self, entries, total_voxels: int):
        super().__init__(entries)
        self.total_voxels = int(total_voxels)

    @property
    def foreground_voxels(self) -> int:
        return sum(info.voxel_count for info in self.values())

    def counts(self) -> dict[int, int]:
        return {label: info.voxel_count for label, info in self.items()}

    def report(self) -> SegmentReport:
        sizes = sorted(info.voxel_count for info in self.values())
        fg = 100.0 * sum(sizes) / self.total_voxels if self.total_voxels else 0.0
        if not sizes:
            return SegmentReport(0, None, None, None, fg)
        # lower median for even counts
        median = sizes[(len(sizes) - 1) // 2]
        return SegmentReport(len(sizes), sizes[0], sizes[-1], median, fg)


def segment_table(labels: np.ndarray) -> SegmentTable:
    labels = np.asarray(labels)
    values, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    compact = inverse.reshape(labels.shape)
    # np.unique is sorted, so background (if present) is compact id 0
    if values.size and values[0] == 0:
        objects = ndimage.find_objects(compact)
        offset = 0
    else:
        objects = ndimage.find_objects(compact + 1)
        offset = 1
    entries = {}
    for cid, (value, count) in enumerate(zip(values, counts)):
        if value == 0:
            continue
        sl = objects[cid - 1 + offset]
        entries[int(value)] = SegmentInfo(
            int(count),
            tuple(s.start for s in sl),
            tuple(s.stop - 1 for s in sl),
        )
    return SegmentTable(entries, labels.size)


def _priority_rank(labels: np.ndarray) -> np.ndarray:
    """Nonzero labels ordered by voxel count descending, then label ascending."""
    values, counts = np.unique(labels[labels != 0], return_counts=True)
    return values[np.lexsort((values, -counts))]


def _rank_of(ranked: np.ndarray, values: np.ndarray) -> np.ndarray:
    sorter = np.argsort(ranked)
    return sorter[np.searchsorted(ranked, values, sorter=sorter)]


def dilate(labels: np.ndarray, connectivity: int = 26, iterations: int = 1) -> np.ndarray:
    """Grow every label into adjacent background.

    Labelled voxels are never overwritten. When several labels reach the same
    voxel in one iteration the label with more voxels wins, then the smaller id.
    """
    if iterations < 1:
        raise ValueError("iterations must be positive")
    out = np.asarray(labels).astype(np.uint32, copy=True)
    footprint = structuring_element(connectivity)
    for _ in range(iterations):
        ranked = _priority_rank(out)
        if ranked.size == 0:
            break
        rank = np.full(out.shape, ranked.size, dtype=np.int64)
        fg = out != 0
        rank[fg] = _rank_of(ranked, out[fg])
        best = ndimage.minimum_filter(rank, footprint=footprint, mode="constant", cval=ranked.size)
        grow = (~fg) & (best < ranked.size)
        if not grow.any():
            break
        out[grow] = ranked[best[grow]]
    return out


def erode(labels: np.ndarray, connectivity: int = 26, iterations: int = 1) -> np.ndarray:
    """Per-label erosion; a voxel survives while all its neighbours share its label.

    Out-of-bounds neighbours replicate the nearest in-bounds voxel, so they
    never erode anything.
    """
    if iterations < 1:
        raise ValueError("iterations must be positive")
    out = np.asarray(labels).astype(np.uint32, copy=True)
    footprint = structuring_element(connectivity)
    for _ in range(iterations):
        lo = ndimage.minimum_filter(out, footprint=footprint, mode="nearest")
        hi = ndimage.maximum_filter(out, footprint=footprint, mode="nearest")
        out[(lo != out) | (hi != out)] = 0
    return out


def close(labels: np.ndarray, connectivity: int = 26, iterations: int = 1, threads=None) -> np.ndarray:
    """Per-label binary closing that only fills background.

    Each label's mask is dilated then eroded with the same element and count.
    Out-of-bounds voxels replicate the nearest in-bounds voxel, so objects cut
    by the volume edge behave as if they continued past it. Voxels claimed by
    several labels go to the larger label, then the smaller id.
    """
    if iterations < 1:
        raise ValueError("iterations must be positive")
    labels = np.asarray(labels).astype(np.uint32, copy=False)
    footprint = structuring_element(connectivity)
    ranked = _priority_rank(labels)
    if ranked.size == 0:
        return labels.copy()
    table = segment_table(labels)
    pad = iterations + 1

    def closed_additions(rank):
        label = int(ranked[rank])
        info = table[label]
        box = tuple(
            slice(max(lo - pad, 0), min(hi + pad + 1, n))
            for lo, hi, n in zip(info.bbox_min, info.bbox_max, labels.shape)
        )
        sub = labels[box]
        mask = np.pad(sub == label, pad, mode="edge")
        grown = ndimage.binary_dilation(mask, footprint, iterations=iterations)
        closed = ndimage.binary_erosion(grown, footprint, iterations=iterations)
        closed = closed[(slice(pad, -pad),) * 3]
        return box, closed & (sub == 0)

    best = np.full(labels.shape, ranked.size, dtype=np.int64)
    results = thread_map(closed_additions, range(ranked.size), threads)
    for rank, (box, added) in enumerate(results):
        view = best[box]
        view[added] = np.minimum(view[added], rank)
    out = labels.copy()
    fill = best < ranked.size
    out[fill] = ranked[best[fill]]
    return out


def morphology(labels: np.ndarray, op: str, connectivity: int = 26, iterations: int = 1, threads=None):
    if op == "dilate":
        return dilate(labels, connectivity, iterations)
    if op == "erode":
        return erode(labels, connectivity, iterations)
    if op == "close":
        return close(labels, connectivity, iterations, threads=threads)
    raise ValueError(f"unknown morphology op {op!r}")
