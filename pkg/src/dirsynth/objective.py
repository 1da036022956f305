"""Registration energy terms and their gradients.

Every dissimilarity gradient is taken with respect to the displacement at
each voxel, via the sampler's per-voxel warp gradient. The smoothness
penalty is differentiated with respect to the velocity field, and
:func:`evaluate` adds the two on the assumption that the exponential map
acts as the identity on the update direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DegenerateInputError, InvalidArgumentError
from .grid import LabelMap
from .sampler import warp_channels_with_gradient, warp_with_gradient

KINDS = ("mse", "ncc", "dice", "regularizer")
MSE_SCALES = ("variance", "none")
TARGETS = ("primary_contrast", "secondary_contrast", "labels", "velocity")
_ALLOWED = {
    "mse": ("primary_contrast", "secondary_contrast"),
    "ncc": ("primary_contrast", "secondary_contrast"),
    "dice": ("labels",),
    "regularizer": ("velocity",),
}


@dataclass(frozen=True)
class LossTerm:
    kind: str
    weight: float = 1.0
    target: str = "primary_contrast"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if self.target not in _ALLOWED[self.kind]:
            raise InvalidArgumentError(f"{self.kind} cannot target {self.target!r}")
        weight = float(self.weight)
        if not np.isfinite(weight) or weight < 0:
            raise InvalidArgumentError(f"loss weight must be finite and non-negative, got {self.weight}")
        object.__setattr__(self, "weight", weight)

    @property
    def name(self):
        return f"{self.kind}:{self.target}"


@dataclass(frozen=True)
class LossConfig:
    terms: tuple
    dice_smooth: float = 1e-5
    dice_sigma: float = 0.0  # Gaussian blur of both one-hot stacks before soft Dice, voxels
    mse_scale: str = "variance"  # "variance": divide MSE by the fixed image variance; "none"

    def __post_init__(self):
        terms = tuple(t if isinstance(t, LossTerm) else LossTerm(**t) for t in self.terms)
        object.__setattr__(self, "terms", terms)
        names = [t.name for t in terms]
        if len(set(names)) != len(names):
            raise InvalidArgumentError(f"duplicate loss terms: {names}")
        if not any(t.kind != "regularizer" and t.weight > 0 for t in terms):
            raise InvalidArgumentError("at least one dissimilarity term needs a positive weight")
        if not self.dice_smooth > 0:
            raise InvalidArgumentError("dice_smooth must be positive")
        if self.dice_sigma < 0:
            raise InvalidArgumentError("dice_sigma must be non-negative")
        if self.mse_scale not in MSE_SCALES:
            raise InvalidArgumentError(f"mse_scale must be one of {MSE_SCALES}, got {self.mse_scale!r}")

    @classmethod
    def unsupervised(cls, regularizer=1.0):
        """MSE on the primary contrast plus label Dice, equally weighted."""
        return cls((
            LossTerm("mse", 1.0, "primary_contrast"),
            LossTerm("dice", 1.0, "labels"),
            LossTerm("regularizer", regularizer, "velocity"),
        ))

    @classmethod
    def supervised(cls, secondary_weight=1.0, regularizer=1.0):
        """The unsupervised terms plus MSE on the paired secondary contrast."""
        base = cls.unsupervised(regularizer).terms
        return cls(base[:2] + (LossTerm("mse", secondary_weight, "secondary_contrast"),) + base[2:])

    def term(self, kind, target):
        for t in self.terms:
            if t.kind == kind and t.target == target:
                return t
        return None

    def targets(self):
        return {t.target for t in self.terms}

    def to_dict(self):
        return {
            "terms": [{"kind": t.kind, "weight": t.weight, "target": t.target} for t in self.terms],
            "dice_smooth": self.dice_smooth,
            "dice_sigma": self.dice_sigma,
            "mse_scale": self.mse_scale,
        }


@dataclass
class LossReport:
    values: dict
    total: float
    gradient: np.ndarray


def _array(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _mask_array(mask, shape):
    if mask is None:
        return None
    m = np.asarray(getattr(mask, "data", mask), dtype=bool)
    if m.shape != shape:
        raise InvalidArgumentError(f"mask shape {m.shape} does not match {shape}")
    if not m.any():
        raise InvalidArgumentError("mask is empty")
    return m


def _pair(a, b, mask):
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b, _mask_array(mask, a.shape)


# -- mean squared error ------------------------------------------------------

def mse(a, b, mask=None) -> float:
    """Mean of ``(a - b)**2`` over the mask (all voxels if none)."""
    a, b, m = _pair(a, b, mask)
    diff = a - b if m is None else (a - b)[m]
    return float(np.mean(diff * diff))


def mse_gradient(warped, fixed, mask=None):
    """d mse / d warped, per voxel."""
    w, f, m = _pair(warped, fixed, mask)
    if m is None:
        return 2.0 * (w - f) / w.size
    return np.where(m, 2.0 * (w - f) / m.sum(), 0.0)


# -- normalised cross correlation ---------------------------------------------

def _ncc_parts(a, b, m):
    if m is not None:
        a, b = a[m], b[m]
    else:
        a, b = a.ravel(), b.ravel()
    if a.size < 2:
        raise InvalidArgumentError("ncc needs at least 2 voxels")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(np.dot(da, da)), float(np.dot(db, db))
    if saa == 0.0 or sbb == 0.0:
        raise DegenerateInputError("ncc is undefined for an input that is constant over the mask")
    corr = float(np.dot(da, db)) / np.sqrt(saa * sbb)
    return corr, da, db, saa, sbb


def ncc(a, b, mask=None) -> float:
    """``1 - pearson(a, b)`` over the mask; 0 for perfect correlation, 2 for anticorrelation."""
    a, b, m = _pair(a, b, mask)
    corr, *_ = _ncc_parts(a, b, m)
    return 1.0 - corr


def ncc_gradient(warped, fixed, mask=None):
    """d ncc / d warped, per voxel."""
    w, f, m = _pair(warped, fixed, mask)
    corr, dw, df, sww, sff = _ncc_parts(w, f, m)
    d = -(df / np.sqrt(sww * sff) - corr * dw / sww)
    if m is None:
        return d.reshape(w.shape)
    out = np.zeros(w.shape)
    out[m] = d
    return out


# -- soft Dice -----------------------------------------------------------------

def _dice_terms(p, q, smooth):
    # p, q: (L, n) soft and hard masks; returns loss and d loss / d p
    axes = tuple(range(1, p.ndim))
    inter = (p * q).sum(axis=axes)
    denom = p.sum(axis=axes) + q.sum(axis=axes) + smooth
    score = (2.0 * inter + smooth) / denom
    loss = 1.0 - float(np.mean(score))
    shape = (-1,) + (1,) * (p.ndim - 1)
    dscore = (2.0 * q * denom.reshape(shape) - (2.0 * inter + smooth).reshape(shape)) / (denom ** 2).reshape(shape)
    return loss, -dscore / p.shape[0]


def soft_dice_loss(warped_labels: Mapping[int, np.ndarray], fixed_labels: LabelMap, smooth=1e-5) -> float:
    """One minus the mean soft Dice over non-background labels.

    ``warped_labels`` maps a label value to its soft mask (typically a warped
    one-hot channel). Labels present on only one side count with an empty
    mask on the other.
    """
    if not smooth > 0:
        raise InvalidArgumentError("smooth must be positive")
    fixed = np.asarray(getattr(fixed_labels, "labels", fixed_labels))
    values = sorted(set(int(k) for k in warped_labels) | set(int(v) for v in np.unique(fixed)))
    values = [v for v in values if v != 0]
    if not values:
        raise InvalidArgumentError("soft dice needs at least one non-background label")
    zeros = np.zeros(fixed.shape)
    p = np.stack([np.asarray(warped_labels.get(v, zeros), dtype=np.float64) for v in values])
    q = np.stack([(fixed == v).astype(np.float64) for v in values])
    if p.shape != q.shape:
        raise InvalidArgumentError(f"soft mask shape {p.shape[1:]} does not match labels {q.shape[1:]}")
    return _dice_terms(p, q, smooth)[0]


# -- smoothness ----------------------------------------------------------------

def smoothness(v) -> float:
    """Mean over voxels and components of squared forward differences.

    The sum of all squared forward differences (every axis, every
    component) is divided by ``3 * n_voxels``.
    """
    vec = np.asarray(getattr(v, "vectors", v), dtype=np.float64)
    if min(vec.shape[:3]) < 2:
        raise InvalidArgumentError(f"smoothness needs at least 2 voxels per axis, got {vec.shape[:3]}")
    total = 0.0
    for axis in range(3):
        d = np.diff(vec, axis=axis)
        total += float(np.sum(d * d))
    return total / (3 * int(np.prod(vec.shape[:3])))


def smoothness_gradient(v):
    vec = np.asarray(getattr(v, "vectors", v), dtype=np.float64)
    scale = 2.0 / (3 * int(np.prod(vec.shape[:3])))
    grad = np.zeros_like(vec)
    for axis in range(3):
        d = np.diff(vec, axis=axis) * scale
        lead = [slice(None)] * 4
        trail = [slice(None)] * 4
        lead[axis] = slice(1, None)
        trail[axis] = slice(None, -1)
        grad[tuple(lead)] += d
        grad[tuple(trail)] -= d
    return grad


# -- assembled energy ------------------------------------------------------------

@dataclass
class LossState:
    """Everything :func:`evaluate` needs at one displacement.

    Warped quantities carry their warp gradients (shape ``dims + (3,)``,
    with a leading channel axis for the soft label masks).
    """

    velocity: Optional[np.ndarray] = None
    fixed_primary: Optional[np.ndarray] = None
    warped_primary: Optional[np.ndarray] = None
    primary_grad: Optional[np.ndarray] = None
    fixed_secondary: Optional[np.ndarray] = None
    warped_secondary: Optional[np.ndarray] = None
    secondary_grad: Optional[np.ndarray] = None
    fixed_onehot: Optional[np.ndarray] = None
    warped_soft: Optional[np.ndarray] = None
    soft_grad: Optional[np.ndarray] = None
    label_values: tuple = ()
    mask: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)


def label_channels(fixed_labels: LabelMap, moving_labels: LabelMap, sigma=0.0):
    """Non-background labels of either map, with their one-hot stacks.

    With ``sigma > 0`` both stacks are Gaussian-blurred. Blurring keeps the
    trilinearly warped masks and the fixed targets equally soft, so the
    Dice optimum does not favour sample points snapped to grid nodes.
    """
    values = tuple(sorted(set(fixed_labels.foreground_labels) | set(moving_labels.foreground_labels)))
    fixed, moving = fixed_labels.one_hot(values), moving_labels.one_hot(values)
    if sigma > 0:
        fixed = np.stack([gaussian_filter(c, sigma, mode="nearest") for c in fixed])
        moving = np.stack([gaussian_filter(c, sigma, mode="nearest") for c in moving])
    return values, fixed, moving


def build_state(
    displacement,
    velocity=None,
    fixed_primary=None,
    moving_primary=None,
    fixed_labels=None,
    moving_labels=None,
    fixed_secondary=None,
    moving_secondary=None,
    mask=None,
    channels=None,
):
    """Warp the moving inputs under ``displacement`` and collect a :class:`LossState`.

    ``channels`` may carry precomputed ``(values, fixed_onehot, moving_onehot)``
    to avoid re-encoding labels on every iteration.
    """
    state = LossState(mask=None if mask is None else np.asarray(mask, dtype=bool))
    if velocity is not None:
        state.velocity = np.asarray(getattr(velocity, "vectors", velocity), dtype=np.float64)
    if moving_primary is not None:
        warped, grad = warp_with_gradient(moving_primary, displacement)
        state.fixed_primary = _array(fixed_primary)
        state.warped_primary, state.primary_grad = warped.data, grad
    if moving_secondary is not None:
        warped, grad = warp_with_gradient(moving_secondary, displacement)
        state.fixed_secondary = _array(fixed_secondary)
        state.warped_secondary, state.secondary_grad = warped.data, grad
    if moving_labels is not None or channels is not None:
        if channels is None:
            channels = label_channels(fixed_labels, moving_labels)
        values, fixed_onehot, moving_onehot = channels
        state.label_values = tuple(values)
        state.fixed_onehot = fixed_onehot
        state.warped_soft, state.soft_grad = warp_channels_with_gradient(moving_onehot, displacement)
    return state


def _require(value, what):
    if value is None:
        raise InvalidArgumentError(f"loss state is missing {what}")
    return value


def _contrast(state, target):
    if target == "primary_contrast":
        return (_require(state.warped_primary, "the warped primary contrast"),
                _require(state.fixed_primary, "the fixed primary contrast"),
                state.primary_grad)
    return (_require(state.warped_secondary, "the warped secondary contrast"),
            _require(state.fixed_secondary, "the fixed secondary contrast"),
            state.secondary_grad)


def evaluate(config: LossConfig, state: LossState) -> LossReport:
    """Per-term values, weighted total, and the descent gradient.

    Terms are evaluated in config order so the total is reproducible.
    Terms with zero weight are still reported when their inputs are present
    but add nothing to the total or the gradient; a zero-weight term whose
    inputs are absent is left out of the report.
    """
    values = {}
    total = 0.0
    grad = None

    def add(g, weight):
        nonlocal grad
        if weight == 0.0:
            return
        grad = weight * g if grad is None else grad + weight * g

    for term in config.terms:
        if term.weight == 0.0 and not _available(state, term):
            continue
        if term.kind in ("mse", "ncc"):
            warped, fixed, wgrad = _contrast(state, term.target)
            if term.kind == "mse":
                scale = _mse_scale(config.mse_scale, fixed, state.mask)
                value = mse(warped, fixed, state.mask) * scale
                dvalue = mse_gradient(warped, fixed, state.mask) * scale
            else:
                value = ncc(warped, fixed, state.mask)
                dvalue = ncc_gradient(warped, fixed, state.mask)
            if wgrad is not None:
                add(dvalue[..., None] * wgrad, term.weight)
        elif term.kind == "dice":
            p = _require(state.warped_soft, "warped soft label masks")
            q = _require(state.fixed_onehot, "fixed one-hot labels")
            if p.shape[0] == 0:
                raise InvalidArgumentError("soft dice needs at least one non-background label")
            value, dp = _dice_terms(p, q, config.dice_smooth)
            if state.soft_grad is not None:
                add(np.einsum("l...,l...k->...k", dp, state.soft_grad), term.weight)
        else:
            v = _require(state.velocity, "the velocity field")
            value = smoothness(v)
            add(smoothness_gradient(v), term.weight)
        values[term.name] = value
        total += term.weight * value
    if grad is None:
        shape = _reference_shape(state)
        grad = np.zeros(shape + (3,))
    return LossReport(values, total, grad)


def _available(state, term):
    if term.kind == "dice":
        return state.warped_soft is not None and state.fixed_onehot is not None
    if term.kind == "regularizer":
        return state.velocity is not None
    if term.target == "secondary_contrast":
        return state.warped_secondary is not None and state.fixed_secondary is not None
    return state.warped_primary is not None and state.fixed_primary is not None


def _mse_scale(mode, fixed, mask):
    # Dividing by the fixed image variance makes the MSE term independent of
    # intensity units, so its weight is comparable with the unitless Dice.
    if mode == "none":
        return 1.0
    fixed = _array(fixed)
    m = _mask_array(mask, fixed.shape)
    var = float(np.var(fixed[m] if m is not None else fixed))
    return 1.0 / var if var > 0 else 1.0


def _reference_shape(state):
    for arr in (state.warped_primary, state.warped_secondary, state.velocity):
        if arr is not None:
            return arr.shape[:3]
    if state.warped_soft is not None:
        return state.warped_soft.shape[1:]
    raise InvalidArgumentError("loss state is empty")
