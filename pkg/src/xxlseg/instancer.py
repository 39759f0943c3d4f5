"""Marker-based watershed turning a background/object/border map into instances.

Flooding is a multi-source geodesic distance on foreground voxels: stepping
onto an object voxel is free, stepping onto a border voxel costs 1. Every
foreground voxel reachable from a marker takes the label of its nearest
marker, the smaller label on ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labels import _half_offsets, _shift_slices, connected_components, segment_table
from .preprocess import BACKGROUND, BORDER, OBJECT
from .volume import scan_order_index


@dataclass
class WatershedConfig:
    connectivity: int = 6
    min_marker_size: int = 0


def extract_markers(classes: np.ndarray, min_marker_size: int = 0, connectivity: int = 6) -> np.ndarray:
    """Connected object-class regions of at least ``min_marker_size`` voxels,
    numbered 1..K in scan order."""
    if min_marker_size < 0:
        raise ValueError("min_marker_size must be non-negative")
    classes = np.asarray(classes)
    comps = connected_components((classes == OBJECT).astype(np.uint32), connectivity)
    if min_marker_size > 0:
        counts = np.bincount(comps.ravel())
        small = counts < min_marker_size
        small[0] = False
        comps[small[comps]] = 0
        comps = connected_components(comps, connectivity)
    return comps


def _neighbour_table(fg: np.ndarray, connectivity: int) -> tuple[np.ndarray, np.ndarray]:
    """Compact foreground indices (scan order) and their neighbour lists.

    Returns ``(flat_index, table)`` where ``table[i]`` lists the compact ids of
    foreground neighbours of voxel ``i`` padded with -1.
    """
    shape = fg.shape
    index = scan_order_index(shape)
    flat = np.sort(index[fg])
    compact = np.full(fg.size, -1, dtype=np.int64)
    compact[flat] = np.arange(flat.size)
    compact_vol = compact.reshape(shape, order="F")

    columns = []
    for off in _half_offsets(connectivity):
        for sign in (1, -1):
            d = tuple(sign * o for o in off)
            src, dst = _shift_slices(d, shape)
            col = np.full(fg.size, -1, dtype=np.int64)
            col_vol = col.reshape(shape, order="F")
            col_vol[src] = compact_vol[dst]
            columns.append(col[flat])
    table = np.stack(columns, axis=1)
    return flat, table


def watershed_instances(classes: np.ndarray, markers: np.ndarray, connectivity: int = 6) -> np.ndarray:
    """Flood foreground from the markers by 0/1 geodesic distance.

    Each reachable foreground voxel takes the smallest marker label among
    those at minimal distance. Marker voxels keep their own label. Voxels no
    marker can reach stay background.
    """
    classes = np.asarray(classes)
    markers = np.asarray(markers)
    if classes.shape != markers.shape:
        raise ValueError(f"shape mismatch: classes {classes.shape}, markers {markers.shape}")
    bad = (markers != 0) & (classes != OBJECT)
    if bad.any():
        where = tuple(int(c) for c in np.argwhere(bad)[0])
        kind = "background" if classes[where] == BACKGROUND else "border"
        raise ValueError(f"marker placed on {kind} voxel at {where}")

    out = np.zeros(classes.shape, dtype=np.uint32)
    fg = (classes == OBJECT) | (classes == BORDER)
    if not markers.any():
        return out

    flat, table = _neighbour_table(fg, connectivity)
    n = flat.size
    cls = classes.ravel(order="F")[flat]
    is_object = cls == OBJECT
    mark = markers.ravel(order="F")[flat].astype(np.int64)

    # object regions are entered at zero cost, so each connected one is
    # reached as a whole at a single distance level
    regions = connected_components(
        (classes == OBJECT).astype(np.uint32), connectivity
    ).ravel(order="F")[flat].astype(np.int64)
    n_regions = int(regions.max()) if n else 0
    order = np.argsort(regions, kind="stable")
    bounds = np.searchsorted(regions[order], np.arange(n_regions + 2))

    def region_members(r):
        return order[bounds[r] : bounds[r + 1]]

    inf = np.iinfo(np.int64).max
    label = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)

    # level 0: every marker-bearing object region, carrying its smallest
    # marker label; marker voxels get their own label back at the end
    seeds = np.flatnonzero(mark)
    region_best = np.full(n_regions + 1, inf, dtype=np.int64)
    np.minimum.at(region_best, regions[seeds], mark[seeds])
    frontier = []
    for r in np.flatnonzero(region_best[1:] < inf) + 1:
        members = region_members(r)
        label[members] = region_best[r]
        done[members] = True
        frontier.append(members)
    frontier = np.concatenate(frontier)

    while frontier.size:
        # border voxels one step from the previous level
        nb = table[frontier]
        src_label = np.repeat(label[frontier], nb.shape[1])
        nb = nb.ravel()
        keep = nb >= 0
        nb, src_label = nb[keep], src_label[keep]
        fresh = ~done[nb]
        nb, src_label = nb[fresh], src_label[fresh]
        # object voxels next to the previous level were already absorbed there
        step = ~is_object[nb]
        nb, src_label = nb[step], src_label[step]
        if nb.size == 0:
            break
        best = np.full(n, inf, dtype=np.int64)
        np.minimum.at(best, nb, src_label)
        new_border = np.unique(nb)
        label[new_border] = best[new_border]
        done[new_border] = True

        # object regions touching the new border voxels join at the same level
        nb = table[new_border]
        src_label = np.repeat(label[new_border], nb.shape[1])
        nb = nb.ravel()
        keep = nb >= 0
        nb, src_label = nb[keep], src_label[keep]
        keep = is_object[nb] & ~done[nb]
        nb, src_label = nb[keep], src_label[keep]
        region_best = np.full(n_regions + 1, inf, dtype=np.int64)
        np.minimum.at(region_best, regions[nb], src_label)
        level = [new_border]
        for r in np.unique(regions[nb]):
            members = region_members(r)
            label[members] = region_best[r]
            done[members] = True
            level.append(members)
        frontier = np.concatenate(level)

    label[seeds] = mark[seeds]
    out_flat = np.zeros(classes.size, dtype=np.uint32)
    out_flat[flat[done]] = label[done]
    return out_flat.reshape(classes.shape, order="F")


def run_watershed_pipeline(classes: np.ndarray, config: WatershedConfig | None = None) -> np.ndarray:
    config = config or WatershedConfig()
    markers = extract_markers(classes, config.min_marker_size, config.connectivity)
    return watershed_instances(classes, markers, config.connectivity)


def instance_count(labels: np.ndarray) -> int:
    return len(segment_table(labels))
