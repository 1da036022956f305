"""Volumetric data model and multi-resolution pyramids.

Arrays are indexed ``data[x, y, z]``; when flattened for storage the x index
varies fastest (Fortran order), which is also the NIfTI convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError


def _triple(values, name, positive=False):
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise InvalidArgumentError(f"{name} must have 3 entries, got {len(out)}")
    if not all(np.isfinite(out)):
        raise InvalidArgumentError(f"{name} must be finite: {out}")
    if positive and min(out) <= 0:
        raise InvalidArgumentError(f"{name} must be strictly positive: {out}")
    return out


def _frozen(array, dtype):
    arr = np.array(array, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar image with geometry and an optional foreground mask."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidArgumentError(f"volume data must be 3D and non-empty, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("volume intensities must be finite")
        object.__setattr__(self, "data", _frozen(data, np.float64))
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing", positive=True))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape != data.shape:
                raise InvalidArgumentError(f"mask shape {mask.shape} differs from data shape {data.shape}")
            object.__setattr__(self, "mask", _frozen(mask, bool))

    @property
    def dims(self):
        return tuple(self.data.shape)

    def with_data(self, data, mask=None):
        """Same geometry, new intensities (and optionally a new mask)."""
        return Volume(data, self.spacing, self.origin, mask)

    def same_geometry(self, other, atol=1e-6):
        return self.dims == tuple(other.dims) and np.allclose(self.spacing, other.spacing, atol=atol)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """A 3D integer segmentation; label 0 is background."""

    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    label_set: tuple = field(init=False)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise InvalidArgumentError(f"label data must be 3D and non-empty, got shape {labels.shape}")
        if labels.dtype.kind == "f":
            if not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)):
                raise InvalidArgumentError("labels must be integers")
        if labels.size and labels.min() < 0:
            raise InvalidArgumentError("labels must be non-negative")
        object.__setattr__(self, "labels", _frozen(labels, np.int64))
        object.__setattr__(self, "spacing", _triple(self.spacing, "spacing", positive=True))
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))
        object.__setattr__(self, "label_set", tuple(int(v) for v in np.unique(self.labels)))

    @property
    def dims(self):
        return tuple(self.labels.shape)

    @property
    def foreground_labels(self):
        return tuple(v for v in self.label_set if v != 0)

    def with_labels(self, labels):
        return LabelMap(labels, self.spacing, self.origin)

    def one_hot(self, label_values: Sequence[int]) -> np.ndarray:
        """Stack of float indicator arrays, one channel per requested label."""
        return np.stack([(self.labels == v).astype(np.float64) for v in label_values])


@dataclass(frozen=True, eq=False)
class Pyramid:
    """Levels ordered coarsest first; ``factors[k]`` is relative to the finest grid."""

    levels: tuple
    factors: tuple

    def __len__(self):
        return len(self.levels)


def _check_factor(dims, factor):
    if int(factor) != factor or factor < 1:
        raise InvalidArgumentError(f"downsampling factor must be a positive integer, got {factor}")
    if factor > min(dims):
        raise InvalidArgumentError(f"factor {factor} exceeds the smallest dimension {min(dims)}")
    return int(factor)


def _block_sums(array, factor):
    """Sum over factor**3 blocks; trailing partial blocks are summed as-is."""
    out = array
    for axis in range(3):
        starts = np.arange(0, array.shape[axis], factor)
        out = np.add.reduceat(out, starts, axis=axis)
    return out


def _block_mean(array, factor):
    sums = _block_sums(np.asarray(array, dtype=np.float64), factor)
    counts = _block_sums(np.ones(array.shape), factor)
    return sums / counts


def downsample(v: Volume, factor: int) -> Volume:
    """Block-mean downsampling by an integer factor.

    Output dims are ``ceil(dims / factor)``; edge blocks average only the
    voxels they contain. A mask is reduced by majority vote with ties going
    to foreground.
    """
    factor = _check_factor(v.dims, factor)
    if factor == 1:
        return v
    data = _block_mean(v.data, factor)
    mask = None
    if v.mask is not None:
        mask = _block_mean(v.mask.astype(np.float64), factor) >= 0.5
    spacing = tuple(s * factor for s in v.spacing)
    return Volume(data, spacing, v.origin, mask)


def downsample_labels(l: LabelMap, factor: int) -> LabelMap:
    """Modal-label downsampling; ties go to the smallest label value."""
    factor = _check_factor(l.dims, factor)
    if factor == 1:
        return l
    values = l.label_set
    counts = np.stack([_block_sums((l.labels == v).astype(np.int64), factor) for v in values])
    # argmax picks the first maximum, and values are sorted ascending
    modal = np.asarray(values, dtype=np.int64)[np.argmax(counts, axis=0)]
    spacing = tuple(s * factor for s in l.spacing)
    return LabelMap(modal, spacing, l.origin)


def build_pyramid(v: Volume, l: Optional[LabelMap] = None, schedule=(4, 2, 1)) -> Pyramid:
    """Build a coarse-to-fine pyramid; ``schedule`` lists factors coarsest first."""
    schedule = [int(f) for f in schedule]
    if not schedule:
        raise InvalidArgumentError("pyramid schedule must not be empty")
    if schedule[-1] != 1:
        raise InvalidArgumentError(f"finest pyramid factor must be 1, got {schedule}")
    if any(a < b for a, b in zip(schedule, schedule[1:])):
        raise InvalidArgumentError(f"pyramid factors must be non-increasing toward fine levels: {schedule}")
    if l is not None and l.dims != v.dims:
        raise InvalidArgumentError(f"label dims {l.dims} differ from volume dims {v.dims}")
    levels = []
    for factor in schedule:
        labels = downsample_labels(l, factor) if l is not None else None
        levels.append((downsample(v, factor), labels))
    return Pyramid(tuple(levels), tuple(schedule))
