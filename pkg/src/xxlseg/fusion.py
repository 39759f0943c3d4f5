"""Fusing per-slice 2D instance maps from three orthogonal stacks into 3D instances.

Stage order: line-segment matching between intersecting orthogonal planes,
closing of single-slice line artefacts along the start axis, per-label
morphological closing, and reinsertion of the original 2D instances.
"""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import labels as lab
from ._threads import thread_map
from .volume import AXES, LABEL_KIND, Volume, VolumeMeta, axis_index, load_volume, save_volume

STACK_MANIFEST = "stack.json"


@dataclass
class SliceStack:
    """Per-axis 2D instance maps, stored as one volume-shaped array per axis.

    ``maps["X"][i]`` is the map of X slice ``i`` (indexed ``[y, z]``), and so on.
    Ids are slice-local: equal ids in different slices mean nothing.
    """

    dims: tuple[int, int, int]
    maps: dict[str, np.ndarray]
    origin: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if set(self.maps) != set(AXES):
            raise ValueError(f"stack needs maps for axes {AXES}, got {sorted(self.maps)}")
        for axis, arr in self.maps.items():
            arr = np.asarray(arr)
            if arr.shape != self.dims:
                raise ValueError(
                    f"dims mismatch: axis {axis} maps have shape {arr.shape}, meta dims {self.dims}"
                )
            self.maps[axis] = arr.astype(np.uint32, copy=False)

    @classmethod
    def from_slices(cls, dims, slices: dict[str, list[np.ndarray]], origin=(0, 0, 0)):
        dims = tuple(int(d) for d in dims)
        maps = {}
        for axis in AXES:
            ax = axis_index(axis)
            planes = slices[axis]
            if len(planes) != dims[ax]:
                raise ValueError(
                    f"dims mismatch: axis {axis} has {len(planes)} slices, expected {dims[ax]}"
                )
            maps[axis] = np.stack([np.asarray(p) for p in planes], axis=ax)
        return cls(dims, maps, origin)

    def slice_map(self, axis: str, index: int) -> np.ndarray:
        ax = axis_index(axis)
        return np.take(self.maps[AXES[ax]], index, axis=ax)

    def n_slices(self, axis: str) -> int:
        return self.dims[axis_index(axis)]

    def instance_count(self) -> int:
        total = 0
        for axis in AXES:
            total += _instance_keys(self.maps[axis], axis_index(axis))[0].size
        return total


@dataclass
class MatchConfig:
    line_overlap_threshold: float = 0.5
    reinsert_overlap_threshold: float = 0.5
    start_axis: str = "Z"
    start_index: int | None = None  # None: middle slice
    closing_iterations: int = 1
    closing_connectivity: int = 26
    threads: int | None = None

    def __post_init__(self):
        for name in ("line_overlap_threshold", "reinsert_overlap_threshold"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {value}")
        self.start_axis = AXES[axis_index(self.start_axis)]
        if self.closing_iterations < 0:
            raise ValueError("closing_iterations must be non-negative")

    def resolve_start(self, dims) -> int:
        n = dims[axis_index(self.start_axis)]
        if self.start_index is None:
            return n // 2
        if not 0 <= self.start_index < n:
            raise ValueError(f"start_index {self.start_index} out of range for {n} slices")
        return int(self.start_index)


@dataclass
class GlobalIndexMap:
    next_global_id: int = 1
    assignments: dict[tuple[str, int, int], int] = field(default_factory=dict)

    def assign(self, key, global_id=None) -> int:
        if key in self.assignments:
            raise KeyError(f"{key} already assigned")
        if global_id is None:
            global_id = self.next_global_id
            self.next_global_id += 1
        self.assignments[key] = global_id
        return global_id


# ---------------------------------------------------------------------------
# instance bookkeeping


def _instance_keys(local: np.ndarray, ax: int):
    """Sorted (slice, local id) keys of all 2D instances of one axis, and the
    per-voxel index into that list (-1 on background)."""
    fg = local != 0
    coord = np.indices(local.shape, sparse=True)[ax]
    width = np.int64(local.max()) + 1
    key = np.where(fg, np.broadcast_to(coord, local.shape).astype(np.int64) * width + local, -1)
    keys, inverse = np.unique(key[fg], return_inverse=True)
    index = np.full(local.shape, -1, dtype=np.int64)
    index[fg] = inverse
    return keys, index, width


@dataclass
class _Instances:
    """All 2D instances of a stack, numbered in (axis, slice, local id) order."""

    offsets: list[int]
    slice_of: np.ndarray
    local_of: np.ndarray
    axis_of: np.ndarray
    area: np.ndarray
    index: dict[str, np.ndarray]

    @property
    def count(self) -> int:
        return self.slice_of.size

    def key(self, i) -> tuple[str, int, int]:
        return AXES[self.axis_of[i]], int(self.slice_of[i]), int(self.local_of[i])


def _index_instances(stack: SliceStack, threads=None) -> _Instances:
    per_axis = thread_map(
        lambda ax: _instance_keys(stack.maps[AXES[ax]], ax), range(3), threads
    )
    offsets, slices, locals_, axes, areas, index = [], [], [], [], [], {}
    total = 0
    for ax, (keys, idx, width) in enumerate(per_axis):
        offsets.append(total)
        slices.append(keys // width)
        locals_.append(keys % width)
        axes.append(np.full(keys.size, ax, dtype=np.int64))
        areas.append(np.bincount(idx[idx >= 0], minlength=keys.size))
        index[AXES[ax]] = np.where(idx >= 0, idx + total, -1)
        total += keys.size
    return _Instances(
        offsets,
        np.concatenate(slices),
        np.concatenate(locals_),
        np.concatenate(axes),
        np.concatenate(areas),
        index,
    )


def _line_matches(inst: _Instances, dims, threshold: float, threads=None):
    """Instance pairs from two orthogonal planes whose shared line segments overlap.

    Two instances from planes A and B meet on exactly one line (parallel to
    the third axis). Their overlap ratio is the length of the common part
    divided by the shorter of the two traces on that line.
    """

    def pair_edges(pair):
        a_ax, b_ax = pair
        ia = inst.index[AXES[a_ax]]
        ib = inst.index[AXES[b_ax]]
        both = (ia >= 0) & (ib >= 0)
        if not both.any():
            return np.empty((0, 2), dtype=np.int64)
        coords = np.indices(dims, sparse=True)
        ca = np.broadcast_to(coords[a_ax], dims)
        cb = np.broadcast_to(coords[b_ax], dims)
        n = np.int64(inst.count)

        pairs, inter = np.unique(ia[both] * n + ib[both], return_counts=True)
        a, b = pairs // n, pairs % n

        # trace length of each instance on every line through it
        fa = ia >= 0
        trace_a_keys, trace_a = np.unique(ia[fa] * dims[b_ax] + cb[fa], return_counts=True)
        fb = ib >= 0
        trace_b_keys, trace_b = np.unique(ib[fb] * dims[a_ax] + ca[fb], return_counts=True)
        len_a = trace_a[np.searchsorted(trace_a_keys, a * dims[b_ax] + inst.slice_of[b])]
        len_b = trace_b[np.searchsorted(trace_b_keys, b * dims[a_ax] + inst.slice_of[a])]

        ratio = inter / np.minimum(len_a, len_b)
        keep = ratio > threshold
        return np.stack([a[keep], b[keep]], axis=1)

    edges = thread_map(pair_edges, [(0, 1), (0, 2), (1, 2)], threads)
    return np.concatenate(edges)


def _priority(ids: np.ndarray, sizes: np.ndarray) -> np.ndarray:
    """Rank per id: larger size first, then smaller id (0 = best)."""
    order = np.lexsort((ids, -sizes))
    rank = np.empty(ids.size, dtype=np.int64)
    rank[order] = np.arange(ids.size)
    return rank


def _resolve_claims(claims: np.ndarray, sizes: dict[int, int] | np.ndarray, ids: np.ndarray | None = None):
    """Resolve up to three label claims per voxel.

    ``claims`` has shape (3, n) with -1 for "no claim". A label claimed by two
    or more axes wins outright; otherwise the claimant with more voxels, then
    the smaller id. Voxels without claims get -1.
    """
    c0, c1, c2 = claims
    out = np.full(c0.shape, -1, dtype=np.int64)

    valid = claims >= 0
    if not valid.any():
        return out
    ids = np.unique(claims[valid]) if ids is None else ids
    size_arr = np.asarray([sizes[int(i)] for i in ids]) if isinstance(sizes, dict) else sizes
    rank_of_id = _priority(ids, size_arr)
    big = np.iinfo(np.int64).max
    rank = np.full(claims.shape, big, dtype=np.int64)
    rank[valid] = rank_of_id[np.searchsorted(ids, claims[valid])]
    best = np.take_along_axis(claims, np.argmin(rank, axis=0)[None], axis=0)[0]
    out[:] = np.where(valid.any(axis=0), best, -1)

    m01 = (c0 == c1) & (c0 >= 0)
    m02 = (c0 == c2) & (c0 >= 0)
    m12 = (c1 == c2) & (c1 >= 0)
    out[m12] = c1[m12]
    out[m02] = c0[m02]
    out[m01] = c0[m01]
    return out


# ---------------------------------------------------------------------------
# pipeline stages


def match_slices(stack: SliceStack, config: MatchConfig | None = None, return_index: bool = False):
    """Breadth-first propagation of global ids across matched 2D instances.

    Every instance of the start slice seeds a new global id. An instance
    passes its id to every instance of an orthogonal plane whose shared line
    segment overlaps by more than ``line_overlap_threshold`` (matching either
    orthogonal plane suffices). When propagation stalls, the next unassigned
    instance in (axis, slice, local id) order starts a fresh id.

    The output covers exactly the start-axis foreground; each voxel takes the
    id claimed by at least two axes, otherwise the claimant with more voxels.
    """
    config = config or MatchConfig()
    dims = stack.dims
    inst = _index_instances(stack, config.threads)
    index = GlobalIndexMap()
    out = np.zeros(dims, dtype=np.uint32)
    if inst.count == 0:
        return (out, index) if return_index else out

    edges = _line_matches(inst, dims, config.line_overlap_threshold, config.threads)
    both = np.concatenate([edges, edges[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    starts = np.searchsorted(both[:, 0], np.arange(inst.count + 1))
    neighbours = both[:, 1]

    gid = np.zeros(inst.count, dtype=np.int64)
    s_ax = axis_index(config.start_axis)
    s_idx = config.resolve_start(dims)
    lo, hi = inst.offsets[s_ax], inst.offsets[s_ax + 1] if s_ax < 2 else inst.count
    in_start = np.arange(lo, hi)
    seeds = list(in_start[inst.slice_of[lo:hi] == s_idx])
    seeds += [i for i in range(inst.count)]

    for seed in seeds:
        if gid[seed]:
            continue
        gid[seed] = index.assign(inst.key(seed))
        queue = deque([seed])
        while queue:
            cur = queue.popleft()
            for nb in neighbours[starts[cur] : starts[cur + 1]]:
                if not gid[nb]:
                    gid[nb] = index.assign(inst.key(nb), int(gid[cur]))
                    queue.append(nb)

    sizes = np.bincount(gid, weights=inst.area, minlength=index.next_global_id).astype(np.int64)
    start_fg = inst.index[config.start_axis] >= 0
    claims = np.stack(
        [np.where(inst.index[a][start_fg] >= 0, gid[inst.index[a][start_fg]], -1) for a in AXES]
    )
    ids = np.arange(1, index.next_global_id)
    out[start_fg] = _resolve_claims(claims, sizes[1:], ids)
    return (out, index) if return_index else out


def _artefact_extent(volume: np.ndarray, ax: int) -> dict[int, list[int]]:
    table = lab.segment_table(volume)
    return {label: [info.bbox_min[ax], info.bbox_max[ax]] for label, info in table.items()}


def close_line_artefacts(volume: np.ndarray, stack: SliceStack, config: MatchConfig | None = None) -> np.ndarray:
    """Absorb single-slice regions along the start axis into a neighbouring id.

    A 2D instance of a start-axis slice whose current 3D id spans only that
    slice is relabelled with the id it overlaps best in the adjacent slices,
    when that overlap (relative to the smaller footprint) exceeds
    ``line_overlap_threshold``. Slices are visited outward from the start
    slice. Background is never relabelled.
    """
    config = config or MatchConfig()
    out = np.asarray(volume).astype(np.uint32, copy=True)
    ax = axis_index(config.start_axis)
    n = stack.dims[ax]
    if n < 2:
        return out
    start = config.resolve_start(stack.dims)
    extent = _artefact_extent(out, ax)
    sizes = lab.segment_table(out).counts()
    visit = sorted(range(n), key=lambda k: (abs(k - start), k))

    for k in visit:
        plane_map = stack.slice_map(config.start_axis, k)
        plane = np.take(out, k, axis=ax)
        for lid in np.unique(plane_map[plane_map != 0]):
            footprint = plane_map == lid
            current = plane[footprint]
            current = current[current != 0]
            if current.size == 0:
                continue
            values, counts = np.unique(current, return_counts=True)
            own = int(values[np.argmax(counts)])
            lo_k, hi_k = extent.get(own, (k, k))
            if lo_k != hi_k:
                continue

            best = None
            for nk in (k - 1, k + 1):
                if not 0 <= nk < n:
                    continue
                other = np.take(out, nk, axis=ax)
                hits = other[footprint]
                for g in np.unique(hits[hits != 0]):
                    g = int(g)
                    if g == own:
                        continue
                    inter = int(np.count_nonzero(hits == g))
                    region = int(np.count_nonzero(other == g))
                    ratio = inter / min(int(footprint.sum()), region)
                    cand = (-ratio, -sizes.get(g, 0), g)
                    if best is None or cand < best:
                        best = cand
            if best is None or -best[0] <= config.line_overlap_threshold:
                continue
            target = best[2]
            moved = footprint & (plane != 0)
            plane[moved] = target
            sl = [slice(None)] * 3
            sl[ax] = k
            out[tuple(sl)] = plane
            moved_n = int(moved.sum())
            sizes[target] = sizes.get(target, 0) + moved_n
            sizes[own] = sizes.get(own, 0) - moved_n
            t_lo, t_hi = extent.get(target, (k, k))
            extent[target] = [min(t_lo, k), max(t_hi, k)]
    return out


def reinsert_2d_segments(volume: np.ndarray, stack: SliceStack, config: MatchConfig | None = None) -> np.ndarray:
    """Write every 2D instance back into the volume under its dominant 3D id.

    An instance whose most frequent nonzero 3D label covers more than
    ``reinsert_overlap_threshold`` of its area claims all its voxels for that
    label. Claims from the three axes are resolved per voxel by majority, then
    by current label size, then by smaller id.
    """
    config = config or MatchConfig()
    vol = np.asarray(volume).astype(np.uint32, copy=False)
    inst = _index_instances(stack, config.threads)
    if inst.count == 0:
        return vol.copy()
    table = lab.segment_table(vol)
    sizes = table.counts()

    label_of = np.full(inst.count, -1, dtype=np.int64)
    for axis in AXES:
        idx = inst.index[axis]
        hit = (idx >= 0) & (vol != 0)
        if not hit.any():
            continue
        width = np.int64(vol.max()) + 1
        codes, counts = np.unique(idx[hit] * width + vol[hit], return_counts=True)
        owner, value = codes // width, codes % width
        size = np.asarray([sizes[int(v)] for v in value])
        # per instance: highest count, then larger label, then smaller id
        order = np.lexsort((value, -size, -counts, owner))
        owner_s = owner[order]
        first = np.ones(owner_s.size, dtype=bool)
        first[1:] = owner_s[1:] != owner_s[:-1]
        pick = order[first]
        ratio = counts[pick] / inst.area[owner[pick]]
        ok = ratio > config.reinsert_overlap_threshold
        label_of[owner[pick][ok]] = value[pick][ok]

    claims = np.stack(
        [np.where(inst.index[a] >= 0, label_of[np.maximum(inst.index[a], 0)], -1).ravel() for a in AXES]
    )
    claimed = (claims >= 0).any(axis=0)
    out = vol.copy().ravel()
    if claimed.any():
        sub = claims[:, claimed]
        ids = np.unique(sub[sub >= 0])
        resolved = _resolve_claims(sub, np.asarray([sizes.get(int(i), 0) for i in ids]), ids)
        out[claimed] = resolved
    return out.reshape(vol.shape)


def run_fusion_pipeline(stack: SliceStack, config: MatchConfig | None = None) -> np.ndarray:
    config = config or MatchConfig()
    volume = match_slices(stack, config)
    volume = close_line_artefacts(volume, stack, config)
    if config.closing_iterations > 0:
        volume = lab.close(
            volume, config.closing_connectivity, config.closing_iterations, threads=config.threads
        )
    return reinsert_2d_segments(volume, stack, config)


# ---------------------------------------------------------------------------
# on-disk stack format


def save_stack(stack: SliceStack, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for axis in AXES:
        sub = directory / axis
        sub.mkdir(exist_ok=True)
        for i in range(stack.n_slices(axis)):
            plane = stack.slice_map(axis, i)
            save_volume(Volume(plane[:, :, None]), sub / f"{i:04d}")
    manifest = {
        "meta": {
            "dims": list(stack.dims),
            "origin": list(stack.origin),
            "voxel_kind": LABEL_KIND,
        },
        "axes": {axis: stack.n_slices(axis) for axis in AXES},
    }
    path = directory / STACK_MANIFEST
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_stack(directory: str | os.PathLike) -> SliceStack:
    directory = Path(directory)
    path = directory / STACK_MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"missing stack manifest {path}")
    try:
        doc = json.loads(path.read_text())
        meta = VolumeMeta(tuple(doc["meta"]["dims"]), tuple(doc["meta"].get("origin", (0, 0, 0))))
        counts = doc["axes"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"malformed stack manifest {path}: {exc}") from exc
    slices = {}
    for axis in AXES:
        ax = axis_index(axis)
        n = int(counts.get(axis, -1))
        if n != meta.dims[ax]:
            raise ValueError(
                f"dims mismatch: manifest lists {n} {axis} slices, dims give {meta.dims[ax]}"
            )
        expected = tuple(d for i, d in enumerate(meta.dims) if i != ax)
        planes = []
        for i in range(n):
            data = load_volume(directory / axis / f"{i:04d}").data
            if data.shape != expected + (1,):
                raise ValueError(
                    f"dims mismatch: {axis}/{i:04d} has shape {data.shape[:2]}, expected {expected}"
                )
            planes.append(data[:, :, 0])
        slices[axis] = planes
    return SliceStack.from_slices(meta.dims, slices, meta.origin)
