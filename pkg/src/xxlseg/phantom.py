"""Synthetic ground-truth volumes built from sheets, pipes, rivets and brackets.

Everything is axis-aligned and rasterised on the integer grid, so every
object's voxel count has a closed form (see :func:`analytic_voxel_count`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import labels as lab
from ._threads import thread_map
from .fusion import SliceStack
from .volume import AXES, axis_index

KINDS = ("sheet", "pipe", "rivet", "bracket")


class PhantomError(ValueError):
    """Invalid phantom description or an object that cannot be placed."""


def disk_count(radius: int) -> int:
    """Lattice points with i^2 + j^2 <= r^2."""
    return sum(2 * math.isqrt(radius * radius - i * i) + 1 for i in range(-radius, radius + 1))


def _disk(radius: int) -> np.ndarray:
    i, j = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return i * i + j * j <= radius * radius


def _orient(box: np.ndarray, axis: int) -> np.ndarray:
    """Rotate a shape built with its long axis last so that it lies along ``axis``."""
    return np.moveaxis(box, 2, axis)


@dataclass
class ObjectSpec:
    kind: str
    contrast: float = 0.8
    thickness: int = 2  # sheet
    orientation: str = "Z"  # sheet normal, or pipe/rivet axis
    size: tuple[int, ...] = (16, 16)  # sheet in-plane extents, or bracket box dims
    radius: int = 2  # pipe, rivet
    length: int = 16  # pipe, rivet shaft
    position: tuple[int, int, int] | None = None  # bounding-box min corner

    def mask(self) -> np.ndarray:
        ax = axis_index(self.orientation)
        if self.kind == "sheet":
            a, b = self.size
            ext = [0, 0, 0]
            others = [i for i in range(3) if i != ax]
            ext[ax] = self.thickness
            ext[others[0]], ext[others[1]] = a, b
            return np.ones(ext, dtype=bool)
        if self.kind == "bracket":
            return np.ones(tuple(self.size), dtype=bool)
        if self.kind == "pipe":
            shape = np.repeat(_disk(self.radius)[:, :, None], self.length, axis=2)
            return _orient(shape, ax)
        if self.kind == "rivet":
            r = self.radius
            width = 2 * (r + 1) + 1
            shape = np.zeros((width, width, self.length + 1), dtype=bool)
            shape[:, :, 0] = _disk(r + 1)
            shape[1:-1, 1:-1, 1:] = _disk(r)[:, :, None]
            return _orient(shape, ax)
        raise PhantomError(f"unknown object kind {self.kind!r}")

    def analytic_voxel_count(self) -> int:
        if self.kind == "sheet":
            return self.thickness * self.size[0] * self.size[1]
        if self.kind == "bracket":
            return int(np.prod(self.size))
        if self.kind == "pipe":
            return self.length * disk_count(self.radius)
        if self.kind == "rivet":
            return self.length * disk_count(self.radius) + disk_count(self.radius + 1)
        raise PhantomError(f"unknown object kind {self.kind!r}")

    def min_thickness(self) -> int:
        if self.kind == "sheet":
            return self.thickness
        if self.kind == "bracket":
            return min(self.size)
        # rivet heads are one voxel thick; the shaft is what counts here
        return min(2 * self.radius + 1, self.length)


def analytic_voxel_count(obj: ObjectSpec) -> int:
    return obj.analytic_voxel_count()


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int]
    seed: int = 0
    objects: list[ObjectSpec] = field(default_factory=list)
    noise_sigma: float = 0.05
    min_gap: int = 1
    max_retries: int = 200

    @classmethod
    def from_dict(cls, doc) -> "PhantomSpec":
        return _parse_spec(doc)

    def to_dict(self) -> dict:
        objs = []
        for o in self.objects:
            d = {"type": o.kind, "contrast": o.contrast}
            if o.kind == "sheet":
                d.update(thickness=o.thickness, orientation=o.orientation, size=list(o.size))
            elif o.kind == "bracket":
                d.update(size=list(o.size))
            else:
                d.update(radius=o.radius, length=o.length, axis=o.orientation)
            if o.position is not None:
                d["position"] = list(o.position)
            objs.append(d)
        return {
            "dims": list(self.dims),
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "min_gap": self.min_gap,
            "objects": objs,
        }


# ---------------------------------------------------------------------------
# JSON parsing with field-level diagnostics


def _need(doc, key, where):
    if key not in doc:
        raise PhantomError(f"{where}{key}: missing required field")
    return doc[key]


def _int(value, where, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise PhantomError(f"{where}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise PhantomError(f"{where}: must be >= {minimum}, got {value}")
    return value


def _ints(value, n, where, minimum=None):
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise PhantomError(f"{where}: expected a list of {n} integers, got {value!r}")
    return tuple(_int(v, f"{where}[{i}]", minimum) for i, v in enumerate(value))


def _float(value, where, lo=None, hi=None, lo_open=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise PhantomError(f"{where}: expected a finite number, got {value!r}")
    value = float(value)
    if lo is not None and (value < lo or (lo_open and value == lo)):
        raise PhantomError(f"{where}: out of range, got {value}")
    if hi is not None and value > hi:
        raise PhantomError(f"{where}: out of range, got {value}")
    return value


def _axis(value, where):
    if not isinstance(value, str) or value.upper() not in AXES:
        raise PhantomError(f"{where}: expected one of X, Y, Z, got {value!r}")
    return value.upper()


def _parse_object(doc, i) -> ObjectSpec:
    where = f"objects[{i}]."
    if not isinstance(doc, dict):
        raise PhantomError(f"objects[{i}]: expected an object")
    kind = _need(doc, "type", where)
    if kind not in KINDS:
        raise PhantomError(f"{where}type: expected one of {', '.join(KINDS)}, got {kind!r}")
    obj = ObjectSpec(kind, contrast=_float(doc.get("contrast", 0.8), where + "contrast", 0.0, 1.0, lo_open=True))
    if kind == "sheet":
        obj.thickness = _int(_need(doc, "thickness", where), where + "thickness", 1)
        obj.orientation = _axis(doc.get("orientation", "Z"), where + "orientation")
        obj.size = _ints(_need(doc, "size", where), 2, where + "size", 1)
    elif kind == "bracket":
        obj.size = _ints(_need(doc, "size", where), 3, where + "size", 1)
    else:
        obj.radius = _int(_need(doc, "radius", where), where + "radius", 0)
        obj.length = _int(_need(doc, "length", where), where + "length", 1)
        obj.orientation = _axis(doc.get("axis", "Z"), where + "axis")
    if doc.get("position") is not None:
        obj.position = _ints(doc["position"], 3, where + "position", 0)
    return obj


def _parse_spec(doc) -> PhantomSpec:
    if not isinstance(doc, dict):
        raise PhantomError("spec: expected a JSON object")
    dims = _ints(_need(doc, "dims", ""), 3, "dims", 1)
    seed = _int(doc.get("seed", 0), "seed", 0)
    spec = PhantomSpec(
        dims,
        seed=seed,
        noise_sigma=_float(doc.get("noise_sigma", 0.05), "noise_sigma", 0.0),
        min_gap=_int(doc.get("min_gap", 1), "min_gap", 0),
    )
    if "objects" in doc:
        objs = doc["objects"]
        if not isinstance(objs, list):
            raise PhantomError("objects: expected a list")
        spec.objects = [_parse_object(o, i) for i, o in enumerate(objs)]
    if "random_objects" in doc:
        rnd = doc["random_objects"]
        if not isinstance(rnd, dict):
            raise PhantomError("random_objects: expected an object")
        counts = {
            k: _int(rnd.get(k, 0), f"random_objects.{k}", 0)
            for k in ("sheets", "pipes", "rivets", "brackets")
        }
        unknown = set(rnd) - set(counts) - {"min_thickness"}
        if unknown:
            raise PhantomError(f"random_objects.{sorted(unknown)[0]}: unknown field")
        min_t = _int(rnd.get("min_thickness", 1), "random_objects.min_thickness", 1)
        extra = random_objects(seed, dims, min_thickness=min_t, **counts)
        spec.objects.extend(extra)
    return spec


# ---------------------------------------------------------------------------
# generation


def random_objects(
    seed: int,
    dims,
    sheets: int = 2,
    pipes: int = 1,
    rivets: int = 3,
    brackets: int = 1,
    min_thickness: int = 1,
) -> list[ObjectSpec]:
    """Random unplaced objects sized to fit ``dims``; positions are left to the
    generator. ``min_thickness`` bounds sheet thickness, bracket edges and
    rod diameters from below."""
    rng = np.random.default_rng([seed, 0x5EED])
    span = min(dims)
    objs = []
    r_min = max(1, math.ceil((min_thickness - 1) / 2))
    for _ in range(sheets):
        t = int(rng.integers(max(2, min_thickness), max(2, min_thickness) + 2))
        objs.append(ObjectSpec(
            "sheet",
            contrast=float(rng.uniform(0.5, 1.0)),
            thickness=t,
            orientation=AXES[int(rng.integers(3))],
            size=(int(rng.integers(span // 4, span // 2 + 1)), int(rng.integers(span // 4, span // 2 + 1))),
        ))
    for _ in range(pipes):
        objs.append(ObjectSpec(
            "pipe",
            contrast=float(rng.uniform(0.5, 1.0)),
            radius=int(rng.integers(max(r_min, 2), max(r_min, 2) + 2)),
            length=int(rng.integers(span // 3, span // 2 + 1)),
            orientation=AXES[int(rng.integers(3))],
        ))
    for _ in range(rivets):
        objs.append(ObjectSpec(
            "rivet",
            contrast=float(rng.uniform(0.5, 1.0)),
            radius=int(rng.integers(r_min, r_min + 2)),
            length=int(rng.integers(max(4, min_thickness), max(4, min_thickness) + 4)),
            orientation=AXES[int(rng.integers(3))],
        ))
    for _ in range(brackets):
        lo = max(3, min_thickness)
        objs.append(ObjectSpec(
            "bracket",
            contrast=float(rng.uniform(0.5, 1.0)),
            size=tuple(int(rng.integers(lo, lo + span // 6 + 1)) for _ in range(3)),
        ))
    return objs


def random_phantom_spec(seed: int, dims=(48, 48, 48), noise_sigma: float = 0.05,
                        min_gap: int = 1, **counts) -> PhantomSpec:
    return PhantomSpec(
        tuple(dims), seed=seed, objects=random_objects(seed, dims, **counts),
        noise_sigma=noise_sigma, min_gap=min_gap,
    )


def generate_phantom(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Rasterise ``spec`` into ``(scalar float32, labels uint32)``.

    Objects get labels 1..K in list order. Unpositioned objects are dropped
    at random corners until they keep ``min_gap`` voxels (chessboard) from
    everything placed before; after ``max_retries`` failures a
    :class:`PhantomError` is raised.
    """
    dims = tuple(spec.dims)
    labels = np.zeros(dims, dtype=np.uint32)
    scalar = np.zeros(dims, dtype=np.float64)
    forbidden = np.zeros(dims, dtype=bool)
    root = np.random.SeedSequence(spec.seed)
    placement_seq, noise_seq = root.spawn(2)
    object_seqs = placement_seq.spawn(len(spec.objects))
    gap_se = ndimage.generate_binary_structure(3, 3)

    for k, (obj, seq) in enumerate(zip(spec.objects, object_seqs), start=1):
        mask = obj.mask()
        ext = mask.shape
        if any(e > d for e, d in zip(ext, dims)):
            raise PhantomError(f"objects[{k - 1}]: extent {ext} does not fit dims {dims}")
        rng = np.random.default_rng(seq)
        placed = None
        tries = [obj.position] if obj.position is not None else [
            tuple(int(rng.integers(0, d - e + 1)) for e, d in zip(ext, dims))
            for _ in range(spec.max_retries)
        ]
        for corner in tries:
            if any(c + e > d for c, e, d in zip(corner, ext, dims)):
                continue
            box = tuple(slice(c, c + e) for c, e in zip(corner, ext))
            if not (forbidden[box] & mask).any():
                placed = box
                break
        if placed is None:
            raise PhantomError(f"objects[{k - 1}]: could not place {obj.kind} after {len(tries)} attempts")

        region = labels[placed]
        region[mask] = k
        scalar[placed][mask] = obj.contrast
        # grow the keep-out zone by the gap around the new object
        pad = spec.min_gap
        big = tuple(slice(max(s.start - pad, 0), min(s.stop + pad, d)) for s, d in zip(placed, dims))
        local = labels[big] == k
        if pad > 0:
            local = ndimage.binary_dilation(local, gap_se, iterations=pad)
        forbidden[big] |= local

    if spec.noise_sigma > 0:
        noise = np.random.default_rng(noise_seq).normal(0.0, spec.noise_sigma, dims)
        scalar += noise
    return np.clip(scalar, 0.0, 1.0).astype(np.float32), labels


def perfect_slice_stack(reference: np.ndarray, threads=None) -> SliceStack:
    """Slice ``reference`` along all three axes and renumber each slice's
    instances by 2D connected components (8-connectivity), so no id carries
    information across slices."""
    reference = np.asarray(reference)
    dims = reference.shape

    def axis_maps(ax):
        out = np.zeros(dims, dtype=np.uint32)
        for i in range(dims[ax]):
            plane = np.take(reference, i, axis=ax)
            sl = [slice(None)] * 3
            sl[ax] = i
            out[tuple(sl)] = lab.connected_components(plane, 26)
        return out

    maps = dict(zip(AXES, thread_map(axis_maps, range(3), threads)))
    return SliceStack(dims, maps)


def corrupt_stack(stack: SliceStack, seed: int, split_rate: float = 0.1, drop_rate: float = 0.0,
                  return_counts: bool = False):
    """Randomly drop or split 2D instances.

    Each instance is dropped with probability ``drop_rate``; survivors are cut
    in two by a random line through their centroid with probability
    ``split_rate`` (a cut that leaves one side empty is not counted). Every
    slice draws from its own stream derived from ``seed``.
    """
    for name, rate in (("split_rate", split_rate), ("drop_rate", drop_rate)):
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {rate}")
    maps = {}
    splits = drops = 0
    for ax, axis in enumerate(AXES):
        src = stack.maps[axis]
        dst = src.copy()
        for i in range(stack.dims[ax]):
            plane = np.take(src, i, axis=ax)
            out = plane.copy()
            rng = np.random.default_rng([seed, ax, i])
            next_id = int(plane.max()) + 1
            for lid in np.unique(plane[plane != 0]):
                u_drop, u_split, angle = rng.random(3)
                pix = plane == lid
                if u_drop < drop_rate:
                    out[pix] = 0
                    drops += 1
                    continue
                if u_split >= split_rate:
                    continue
                coords = np.argwhere(pix).astype(np.float64)
                theta = 2.0 * np.pi * angle
                side = (coords - coords.mean(axis=0)) @ np.array([np.cos(theta), np.sin(theta)]) > 0
                if side.all() or not side.any():
                    continue
                moved = coords[side].astype(np.int64)
                out[moved[:, 0], moved[:, 1]] = next_id
                next_id += 1
                splits += 1
            sl = [slice(None)] * 3
            sl[ax] = i
            dst[tuple(sl)] = out
        maps[axis] = dst
    result = SliceStack(stack.dims, maps, stack.origin)
    if return_counts:
        return result, {"split": splits, "dropped": drops}
    return result
