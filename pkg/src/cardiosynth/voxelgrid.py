"""Categorical 3D voxel volumes: label maps, one-hot encoding, file I/O, surfaces.

A :class:`LabelVolume` holds one tissue label per voxel on a regular grid with
physical spacing in millimetres.  Four tissue classes are used throughout:
background (0), LV blood pool (1), LV myocardium (2) and RV blood pool (3).

Volumes are immutable after construction and all functions here are pure, so
everything in this module is safe to share across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

BACKGROUND = 0
LV_POOL = 1
LV_MYO = 2
RV_POOL = 3
NUM_LABELS = 4

FOREGROUND_LABELS = (LV_POOL, LV_MYO, RV_POOL)

VXL_MAGIC = b"VXL1"
_VXL_HEADER = struct.Struct("<4sIIIfffB")


class VxlFormatError(ValueError):
    """Raised when a .vxl file is malformed."""


def _as_f32_tuple(values) -> tuple[float, float, float]:
    # Spacing is quantised to float32 so volumes survive a file round trip
    # bit-exactly (the on-disk format stores 32-bit spacing).
    return tuple(float(np.float32(v)) for v in values)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Per-voxel tissue labels on a regular grid.

    labels:   uint8 array of shape (nx, ny, nz), values in [0, n_labels)
    spacing:  (sx, sy, sz) millimetres per voxel
    n_labels: number of label classes (default 4)
    """

    labels: np.ndarray
    spacing: tuple[float, float, float]
    n_labels: int = NUM_LABELS

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.ndim != 3:
            raise ValueError(f"labels must be 3D, got shape {labels.shape}")
        if any(d < 1 for d in labels.shape):
            raise ValueError(f"all dims must be >= 1, got {labels.shape}")
        spacing = _as_f32_tuple(self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing components must be > 0, got {spacing}")
        if self.n_labels < 1 or self.n_labels > 255:
            raise ValueError(f"n_labels must be in [1, 255], got {self.n_labels}")
        if labels.max(initial=0) >= self.n_labels:
            raise ValueError(
                f"label {int(labels.max())} out of range for n_labels={self.n_labels}"
            )
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def count(self, label: int) -> int:
        return int(np.count_nonzero(self.labels == label))

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.n_labels == other.n_labels
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True, eq=False)
class OneHotVolume:
    """Real-valued class maps, one channel per label.

    channels: float array (n_labels, nx, ny, nz); per-voxel channel sums must
    be 1 within 1e-5 (soft form) or exactly one channel equal to 1 (hard form).
    """

    channels: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        channels = np.asarray(self.channels)
        if channels.ndim != 4:
            raise ValueError(f"channels must be 4D, got shape {channels.shape}")
        sums = channels.sum(axis=0)
        if not np.all(np.abs(sums - 1.0) <= 1e-5):
            worst = float(np.abs(sums - 1.0).max())
            raise ValueError(f"per-voxel channel sums deviate from 1 by {worst:g}")
        channels.flags.writeable = False
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "spacing", _as_f32_tuple(self.spacing))

    @property
    def n_labels(self) -> int:
        return self.channels.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.channels.shape[1:]

    def is_hard(self) -> bool:
        return bool(np.all((self.channels == 0.0) | (self.channels == 1.0)))


@dataclass(frozen=True)
class AnatomyPair:
    """End-diastolic and end-systolic label volumes of one subject at one visit."""

    ed: LabelVolume
    es: LabelVolume

    def __post_init__(self):
        if self.ed.dims != self.es.dims:
            raise ValueError(f"ED/ES dims differ: {self.ed.dims} vs {self.es.dims}")
        if self.ed.spacing != self.es.spacing:
            raise ValueError(
                f"ED/ES spacing differs: {self.ed.spacing} vs {self.es.spacing}"
            )


@dataclass(frozen=True)
class SurfacePointSet:
    """Boundary voxel centres in millimetres, shape (n_points, 3)."""

    points: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def onehot_encode(v: LabelVolume) -> OneHotVolume:
    """Hard one-hot encoding: channel c is 1 exactly where the label equals c."""
    channels = np.zeros((v.n_labels,) + v.dims, dtype=np.float32)
    idx = v.labels[None, ...] == np.arange(v.n_labels, dtype=np.uint8).reshape(
        -1, 1, 1, 1
    )
    channels[idx] = 1.0
    return OneHotVolume(channels=channels, spacing=v.spacing)


def onehot_decode(o: OneHotVolume, n_labels: int | None = None) -> LabelVolume:
    """Per-voxel argmax over channels; ties go to the lowest channel index."""
    labels = np.argmax(o.channels, axis=0).astype(np.uint8)
    return LabelVolume(
        labels=labels, spacing=o.spacing, n_labels=n_labels or o.n_labels
    )


def write_vxl(v: LabelVolume, path) -> None:
    """Write a volume in the VXL format (see ``read_vxl``); lossless."""
    nx, ny, nz = v.dims
    sx, sy, sz = v.spacing
    header = _VXL_HEADER.pack(VXL_MAGIC, nx, ny, nz, sx, sy, sz, v.n_labels)
    with open(path, "wb") as fh:
        fh.write(header)
        # x varies fastest on disk, then y, then z.
        fh.write(v.labels.tobytes(order="F"))


def read_vxl(path) -> LabelVolume:
    """Read a VXL file.

    Layout (all little-endian): magic ``VXL1`` | u32 nx | u32 ny | u32 nz |
    f32 sx | f32 sy | f32 sz | u8 n_labels | nx*ny*nz label bytes, x fastest.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _VXL_HEADER.size or raw[:4] != VXL_MAGIC:
        raise VxlFormatError(f"not a VXL file: {path}")
    magic, nx, ny, nz, sx, sy, sz, n_labels = _VXL_HEADER.unpack_from(raw)
    payload = raw[_VXL_HEADER.size :]
    expected = nx * ny * nz
    if len(payload) != expected:
        raise VxlFormatError(
            f"payload length mismatch in {path}: expected {expected} label bytes, "
            f"got {len(payload)}"
        )
    labels = np.frombuffer(payload, dtype=np.uint8).reshape((nx, ny, nz), order="F")
    return LabelVolume(labels=labels, spacing=(sx, sy, sz), n_labels=n_labels)


def boundary_surface(v: LabelVolume, foreground=FOREGROUND_LABELS) -> SurfacePointSet:
    """Centres (mm) of foreground voxels with a non-foreground 6-neighbour.

    The volume border counts as outside, so foreground voxels touching the
    grid edge are boundary voxels.  Coordinates are ``index * spacing`` with
    the origin at voxel (0, 0, 0).  Empty foreground yields an empty set.
    """
    mask = np.isin(v.labels, np.asarray(list(foreground), dtype=np.uint8))
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        lo = np.take(padded, range(0, mask.shape[axis]), axis=axis)
        hi = np.take(padded, range(2, mask.shape[axis] + 2), axis=axis)
        sl = [slice(1, -1)] * 3
        sl[axis] = slice(None)
        interior &= lo[tuple(sl)] & hi[tuple(sl)]
    boundary = mask & ~interior
    idx = np.argwhere(boundary)
    points = idx.astype(np.float64) * np.asarray(v.spacing, dtype=np.float64)
    return SurfacePointSet(points=points)
