"""Dense volume containers, the sidecar + raw payload file format, and slicing.

Arrays are indexed ``data[x, y, z]`` with ``data.shape == dims``. On disk the
payload is little-endian and x-fastest, which is Fortran order for such an
array.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LABEL_KIND = "label-u32"
SCALAR_KIND = "scalar-f32"

_DTYPES = {
    LABEL_KIND: np.dtype("<u4"),
    SCALAR_KIND: np.dtype("<f4"),
}

SIDECAR_SUFFIX = ".vol.json"

AXES = ("X", "Y", "Z")


class VolumeFormatError(ValueError):
    """Raised for missing, malformed or inconsistent volume files."""


def axis_index(axis: str | int) -> int:
    if isinstance(axis, (int, np.integer)):
        if not 0 <= int(axis) < 3:
            raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
        return int(axis)
    try:
        return AXES.index(str(axis).upper())
    except ValueError:
        raise ValueError(f"axis must be one of X, Y, Z, got {axis!r}") from None


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple[int, int, int]
    origin: tuple[int, int, int] = (0, 0, 0)
    voxel_kind: str = LABEL_KIND

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        origin = tuple(int(o) for o in self.origin)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise VolumeFormatError(f"dims must be three positive integers, got {self.dims}")
        if len(origin) != 3:
            raise VolumeFormatError(f"origin must have three entries, got {self.origin}")
        if self.voxel_kind not in _DTYPES:
            raise VolumeFormatError(f"unknown voxel_kind {self.voxel_kind!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def dtype(self) -> np.dtype:
        return _DTYPES[self.voxel_kind]


@dataclass
class Volume:
    """A label (uint32) or scalar (float32) volume plus its sub-volume origin."""

    data: np.ndarray
    origin: tuple[int, int, int] = (0, 0, 0)
    meta: VolumeMeta = field(init=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if np.issubdtype(data.dtype, np.floating):
            kind = SCALAR_KIND
            if not np.all(np.isfinite(data)):
                raise ValueError("scalar volume contains non-finite values")
        elif np.issubdtype(data.dtype, np.integer) or data.dtype == bool:
            kind = LABEL_KIND
            if data.size and data.min() < 0:
                raise ValueError("label volume contains negative labels")
        else:
            raise ValueError(f"unsupported dtype {data.dtype}")
        self.data = data.astype(_DTYPES[kind].newbyteorder("="), copy=False)
        self.meta = VolumeMeta(data.shape, self.origin, kind)
        self.origin = self.meta.origin

    @property
    def is_label(self) -> bool:
        return self.meta.voxel_kind == LABEL_KIND


def _sidecar_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    if path.name.endswith(SIDECAR_SUFFIX):
        return path
    return path.with_name(path.name + SIDECAR_SUFFIX)


def save_volume(volume: Volume | np.ndarray, path: str | os.PathLike) -> Path:
    """Write ``<name>.vol.json`` and ``<name>.raw``; returns the sidecar path."""
    if not isinstance(volume, Volume):
        volume = Volume(volume)
    sidecar = _sidecar_path(path)
    stem = sidecar.name[: -len(SIDECAR_SUFFIX)]
    payload = sidecar.with_name(stem + ".raw")
    sidecar.parent.mkdir(parents=True, exist_ok=True)

    meta = volume.meta
    raw = volume.data.astype(meta.dtype, copy=False).tobytes(order="F")
    payload.write_bytes(raw)
    doc = {
        "dims": list(meta.dims),
        "origin": list(meta.origin),
        "voxel_kind": meta.voxel_kind,
        "payload": payload.name,
    }
    sidecar.write_text(json.dumps(doc, indent=2) + "\n")
    return sidecar


def read_meta(path: str | os.PathLike) -> tuple[VolumeMeta, Path]:
    sidecar = _sidecar_path(path)
    if not sidecar.is_file():
        raise VolumeFormatError(f"missing volume sidecar {sidecar}")
    try:
        doc = json.loads(sidecar.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"malformed sidecar {sidecar}: {exc}") from exc
    if not isinstance(doc, dict):
        raise VolumeFormatError(f"malformed sidecar {sidecar}: expected a JSON object")
    for key in ("dims", "voxel_kind", "payload"):
        if key not in doc:
            raise VolumeFormatError(f"malformed sidecar {sidecar}: missing field {key!r}")
    try:
        meta = VolumeMeta(tuple(doc["dims"]), tuple(doc.get("origin", (0, 0, 0))), doc["voxel_kind"])
    except (TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed sidecar {sidecar}: {exc}") from exc
    return meta, sidecar.parent / doc["payload"]


def load_volume(path: str | os.PathLike) -> Volume:
    """Load a volume from its sidecar (``name.vol.json`` or the bare ``name``)."""
    meta, payload = read_meta(path)
    if not payload.is_file():
        raise VolumeFormatError(f"missing payload file {payload}")
    raw = payload.read_bytes()
    expected = meta.size * meta.dtype.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"payload length mismatch for {payload}: {len(raw)} bytes, expected {expected}"
        )
    flat = np.frombuffer(raw, dtype=meta.dtype)
    data = flat.reshape(meta.dims, order="F").astype(meta.dtype.newbyteorder("="))
    return Volume(data, meta.origin)


def extract_slice(volume: np.ndarray, axis: str | int, index: int) -> np.ndarray:
    """Copy of the 2D plane ``index`` perpendicular to ``axis``.

    The remaining two axes keep their original order, e.g. a Z slice is
    indexed ``[x, y]``.
    """
    ax = axis_index(axis)
    n = volume.shape[ax]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range for axis {AXES[ax]} of size {n}")
    return np.take(volume, index, axis=ax).copy()


def insert_slice(volume: np.ndarray, axis: str | int, index: int, plane: np.ndarray) -> None:
    """Write ``plane`` back in place; inverse of :func:`extract_slice`."""
    ax = axis_index(axis)
    n = volume.shape[ax]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range for axis {AXES[ax]} of size {n}")
    sl = [slice(None)] * 3
    sl[ax] = index
    volume[tuple(sl)] = plane


def scan_order_index(shape: tuple[int, ...]) -> np.ndarray:
    """Linear x-fastest index of every voxel, same layout as the payload."""
    return np.arange(int(np.prod(shape)), dtype=np.int64).reshape(shape, order="F")
