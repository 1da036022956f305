"""Stationary velocity fields and their diffeomorphic exponentials.

All vectors are in voxel units of the grid they live on. A displacement
``u`` maps a fixed-space voxel ``x`` to moving-space position ``x + u(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, PreconditionError
from .sampler import identity_grid, interpolate

DEFAULT_EXP_STEPS = 6
STABILITY_LIMIT = 0.5


def _frozen_vectors(vectors):
    vec = np.array(vectors, dtype=np.float64, copy=True)
    if vec.ndim != 4 or vec.shape[-1] != 3:
        raise InvalidArgumentError(f"vector field must have shape (nx, ny, nz, 3), got {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise InvalidArgumentError("vector field components must be finite")
    vec.setflags(write=False)
    return vec


@dataclass(frozen=True, eq=False)
class VelocityField:
    vectors: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "vectors", _frozen_vectors(self.vectors))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return tuple(self.vectors.shape[:3])

    def max_norm(self):
        return float(np.sqrt((self.vectors ** 2).sum(axis=-1)).max())

    def __neg__(self):
        return VelocityField(-self.vectors, self.spacing)

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)):
        return cls(np.zeros(tuple(dims) + (3,)), spacing)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Dense displacement; ``provenance`` is ``"direct"`` or ``("exponential", steps)``."""

    vectors: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    provenance: object = "direct"

    def __post_init__(self):
        object.__setattr__(self, "vectors", _frozen_vectors(self.vectors))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        return tuple(self.vectors.shape[:3])

    def norms(self):
        return np.sqrt((self.vectors ** 2).sum(axis=-1))

    def max_norm(self):
        return float(self.norms().max())

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)):
        return cls(np.zeros(tuple(dims) + (3,)), spacing)


def required_steps(v: VelocityField) -> int:
    """Smallest step count satisfying ``2**-steps * max|v| < 0.5``."""
    m = v.max_norm()
    if m < STABILITY_LIMIT:
        return 1
    return max(1, int(math.floor(math.log2(m / STABILITY_LIMIT))) + 1)


def _self_compose(vec, grid):
    # u(x) + u(x + u(x)), edge-clamped
    sampled = interpolate(np.moveaxis(vec, -1, 0), grid + vec)
    return vec + np.moveaxis(sampled, 0, -1)


def exponentiate(v: VelocityField, steps: int = DEFAULT_EXP_STEPS) -> DisplacementField:
    """Scaling and squaring: halve ``v`` ``steps`` times, then self-compose ``steps`` times."""
    if int(steps) != steps or steps < 1:
        raise InvalidArgumentError(f"steps must be a positive integer, got {steps}")
    steps = int(steps)
    if v.max_norm() * 2.0 ** -steps >= STABILITY_LIMIT:
        raise PreconditionError(
            f"velocity max norm {v.max_norm():.4g} needs at least {required_steps(v)} "
            f"scaling steps, got {steps}"
        )
    grid = identity_grid(v.dims)
    vec = v.vectors * 2.0 ** -steps
    for _ in range(steps):
        vec = _self_compose(vec, grid)
    return DisplacementField(vec, v.spacing, ("exponential", steps))


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Displacement of ``outer ∘ inner``: ``inner(x) + outer(x + inner(x))``."""
    if outer.dims != inner.dims:
        raise InvalidArgumentError(f"cannot compose fields of dims {outer.dims} and {inner.dims}")
    coords = identity_grid(inner.dims) + inner.vectors
    sampled = np.moveaxis(interpolate(np.moveaxis(outer.vectors, -1, 0), coords), 0, -1)
    return DisplacementField(inner.vectors + sampled, inner.spacing, "direct")


def jacobian_determinant(u: DisplacementField):
    """Per-voxel ``det(I + grad u)`` in voxel coordinates.

    Central differences inside, one-sided at the boundary. Returns a
    :class:`~dirsynth.grid.Volume`.
    """
    from .grid import Volume

    if min(u.dims) < 3:
        raise InvalidArgumentError(f"jacobian needs at least 3 voxels per axis, got {u.dims}")
    jac = np.empty(u.dims + (3, 3))
    for comp in range(3):
        grads = np.gradient(u.vectors[..., comp], axis=(0, 1, 2))
        for axis in range(3):
            jac[..., comp, axis] = grads[axis]
        jac[..., comp, comp] += 1.0
    return Volume(np.linalg.det(jac), u.spacing)


def upsample_field(vectors, new_dims, ratio):
    """Trilinearly resample a coarse vector field onto a finer grid.

    ``ratio`` is coarse spacing / fine spacing. Voxel centres are aligned
    the way block-mean downsampling aligns them, and vectors are multiplied
    by ``ratio`` so magnitudes stay in voxel units of the fine grid.
    """
    coords = (identity_grid(new_dims) + 0.5) / ratio - 0.5
    sampled = interpolate(np.moveaxis(np.asarray(vectors), -1, 0), coords)
    return np.moveaxis(sampled, 0, -1) * ratio
