"""Trilinear resampling under a displacement field, with analytic gradients.

Sample coordinates are ``x + u(x)`` in voxel units. Coordinates outside the
grid are clamped to the boundary, and the gradient along a clamped axis is
zero because the interpolant is flat there.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import InvalidArgumentError
from .grid import LabelMap, Volume


def identity_grid(dims):
    """Voxel coordinates as an array of shape ``dims + (3,)``."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _vectors(u):
    return np.asarray(getattr(u, "vectors", u), dtype=np.float64)


def _check_field(dims, u):
    vec = _vectors(u)
    if vec.shape != tuple(dims) + (3,):
        raise InvalidArgumentError(f"displacement shape {vec.shape[:3]} does not match grid {tuple(dims)}")
    return vec


@njit(cache=True)
def _trilinear_kernel(src, coords, want_grad, out, grad):
    # src: (C, nx, ny, nz); coords: (M, 3); out: (C, M); grad: (C, M, 3)
    nch = src.shape[0]
    nx, ny, nz = src.shape[1], src.shape[2], src.shape[3]
    dims = (nx, ny, nz)
    lo = np.empty(3, np.intp)
    hi = np.empty(3, np.intp)
    t = np.empty(3)
    free = np.empty(3)
    for m in range(coords.shape[0]):
        for a in range(3):
            n = dims[a]
            p = coords[m, a]
            free[a] = 1.0 if (p >= 0.0 and p <= n - 1) else 0.0
            if p < 0.0:
                p = 0.0
            elif p > n - 1:
                p = float(n - 1)
            if n == 1:
                lo[a] = 0
                hi[a] = 0
                t[a] = 0.0
                free[a] = 0.0
            else:
                i0 = int(np.floor(p))
                if i0 > n - 2:
                    i0 = n - 2
                lo[a] = i0
                hi[a] = i0 + 1
                t[a] = p - i0
        tx, ty, tz = t[0], t[1], t[2]
        sx, sy, sz = 1.0 - tx, 1.0 - ty, 1.0 - tz
        x0, x1, y0, y1, z0, z1 = lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]
        for c in range(nch):
            f000 = src[c, x0, y0, z0]
            f100 = src[c, x1, y0, z0]
            f010 = src[c, x0, y1, z0]
            f110 = src[c, x1, y1, z0]
            f001 = src[c, x0, y0, z1]
            f101 = src[c, x1, y0, z1]
            f011 = src[c, x0, y1, z1]
            f111 = src[c, x1, y1, z1]
            c00 = f000 * sx + f100 * tx
            c10 = f010 * sx + f110 * tx
            c01 = f001 * sx + f101 * tx
            c11 = f011 * sx + f111 * tx
            c0 = c00 * sy + c10 * ty
            c1 = c01 * sy + c11 * ty
            out[c, m] = c0 * sz + c1 * tz
            if want_grad:
                dx = ((f100 - f000) * sy + (f110 - f010) * ty) * sz + (
                    (f101 - f001) * sy + (f111 - f011) * ty
                ) * tz
                grad[c, m, 0] = dx * free[0]
                grad[c, m, 1] = ((c10 - c00) * sz + (c11 - c01) * tz) * free[1]
                grad[c, m, 2] = (c1 - c0) * free[2]


def _run(array, coords, gradient):
    arr = np.asarray(array, dtype=np.float64)
    single = arr.ndim == 3
    src = np.ascontiguousarray(arr[None] if single else arr)
    coords = np.asarray(coords, dtype=np.float64)
    out_shape = coords.shape[:-1]
    pts = np.ascontiguousarray(coords.reshape(-1, 3))
    nch = src.shape[0]
    out = np.empty((nch, pts.shape[0]))
    grad = np.empty((nch, pts.shape[0], 3) if gradient else (1, 1, 3))
    _trilinear_kernel(src, pts, gradient, out, grad)
    out = out.reshape((nch,) + out_shape)
    if gradient:
        grad = grad.reshape((nch,) + out_shape + (3,))
    if single:
        return (out[0], grad[0]) if gradient else out[0]
    return (out, grad) if gradient else out


def interpolate(array, coords):
    """Trilinear samples of ``array`` (3D, or channels-first 4D) at ``coords`` (..., 3)."""
    return _run(array, coords, False)


def interpolate_with_gradient(array, coords):
    """Like :func:`interpolate`, also returning the gradient w.r.t. the coordinates."""
    return _run(array, coords, True)


def nearest(array, coords):
    """Nearest-neighbour samples of an integer array, coordinates clamped."""
    shape = array.shape
    idx = []
    for axis, n in enumerate(shape):
        p = np.clip(coords[..., axis], 0.0, n - 1)
        idx.append(np.floor(p + 0.5).astype(np.intp))
    return array[tuple(idx)]


def warp(moving: Volume, u) -> Volume:
    """Resample ``moving`` at ``x + u(x)`` with trilinear interpolation.

    If ``moving`` has a mask it is warped the same way and thresholded at 0.5.
    """
    coords = identity_grid(moving.dims) + _check_field(moving.dims, u)
    data = interpolate(moving.data, coords)
    mask = None
    if moving.mask is not None:
        mask = interpolate(moving.mask.astype(np.float64), coords) >= 0.5
    return moving.with_data(data, mask)


def warp_labels(moving: LabelMap, u) -> LabelMap:
    coords = identity_grid(moving.dims) + _check_field(moving.dims, u)
    return moving.with_labels(nearest(moving.labels, coords))


def warp_with_gradient(moving: Volume, u):
    """Warp and return ``(warped, gradient)``.

    ``gradient[x]`` is the derivative of the warped intensity at ``x`` with
    respect to ``u(x)``, shape ``dims + (3,)``. The warped volume comes from
    the same kernel as :func:`warp` and matches it bit for bit.
    """
    coords = identity_grid(moving.dims) + _check_field(moving.dims, u)
    value, grad = interpolate_with_gradient(moving.data, coords)
    mask = None
    if moving.mask is not None:
        mask = interpolate(moving.mask.astype(np.float64), coords) >= 0.5
    return moving.with_data(value, mask), grad


def warp_channels_with_gradient(channels, u):
    """Warp a channels-first stack (e.g. one-hot labels) with one kernel pass."""
    channels = np.asarray(channels, dtype=np.float64)
    coords = identity_grid(channels.shape[1:]) + _check_field(channels.shape[1:], u)
    return interpolate_with_gradient(channels, coords)
