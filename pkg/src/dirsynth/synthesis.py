"""Contrast synthesis by registering atlases and carrying their paired contrasts along.

Each atlas is a subject with a primary contrast (the one shared with the
target) and one or more secondary contrasts acquired in the same space. The
atlas primary is registered to the target primary; the same displacement
is then applied to any secondary contrast, and the warped atlases are fused
voxel by voxel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import FitFailure, InvalidArgumentError
from .grid import LabelMap, Volume
from .irmodel import CSFN_TI, WMN_TI, IrSignalParams, estimate_ir_params, ir_signal
from .metrics import hard_dice
from .registration import RegistrationConfig, Subject, register_batch
from .sampler import warp, warp_labels

__all__ = [
    "AtlasSubject",
    "FusionResult",
    "Synthesis",
    "FUSION_METHODS",
    "transfer",
    "fuse",
    "label_similarity_weights",
    "register_atlases",
    "fuse_contrast",
    "synthesize",
    "ti_contrast",
    "ir_signal",
    "estimate_ir_params",
    "IrSignalParams",
]

FUSION_METHODS = ("mean", "median", "weighted_mean")


@dataclass(frozen=True)
class AtlasSubject:
    """A primary contrast plus paired contrasts (and optionally labels) on one grid."""

    primary_contrast: Volume
    secondary_contrasts: dict = field(default_factory=dict)
    labels: Optional[LabelMap] = None
    primary_name: str = "primary"
    atlas_id: Optional[str] = None

    def __post_init__(self):
        dims, spacing = self.primary_contrast.dims, self.primary_contrast.spacing
        names = list(self.secondary_contrasts)
        if self.primary_name in names:
            raise InvalidArgumentError(f"contrast name {self.primary_name!r} used twice")
        for name, vol in self.secondary_contrasts.items():
            if vol.dims != dims or not np.allclose(vol.spacing, spacing):
                raise InvalidArgumentError(f"contrast {name!r} geometry differs from the primary contrast")
        if self.labels is not None and self.labels.dims != dims:
            raise InvalidArgumentError("labels dims differ from the primary contrast")
        object.__setattr__(self, "secondary_contrasts", dict(self.secondary_contrasts))

    def contrast(self, name):
        if name == self.primary_name:
            return self.primary_contrast
        try:
            return self.secondary_contrasts[name]
        except KeyError:
            known = [self.primary_name] + sorted(self.secondary_contrasts)
            raise InvalidArgumentError(f"unknown contrast {name!r}; atlas has {known}") from None

    def as_subject(self):
        return Subject(self.primary_contrast, self.labels)

    @classmethod
    def from_phantom(cls, subject, atlas_id=None):
        contrasts = dict(subject.contrasts)
        primary = contrasts.pop(subject.primary)
        return cls(primary, contrasts, subject.tissue_map, subject.primary, atlas_id)


@dataclass(frozen=True, eq=False)
class FusionResult:
    synthetic: Volume
    method: str
    weights: tuple
    atlas_ids: tuple
    registration_ids: tuple = ()

    def to_dict(self):
        return {
            "method": self.method,
            "atlas_ids": list(self.atlas_ids),
            "weights": [float(w) for w in self.weights],
            "registration_ids": list(self.registration_ids),
        }


def transfer(result, atlas: AtlasSubject, contrast_name) -> Volume:
    """Apply an atlas's estimated displacement to one of its contrasts."""
    vol = atlas.contrast(contrast_name)
    if vol.dims != result.displacement.vectors.shape[:3]:
        raise InvalidArgumentError(f"contrast {contrast_name!r} dims differ from the displacement grid")
    return warp(vol, result.displacement)


def _normalised(weights, n):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise InvalidArgumentError(f"expected {n} weights, got shape {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidArgumentError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise InvalidArgumentError("weights sum to zero")
    return w / total


def fuse(warped, method="mean", weights=None, atlas_ids=None) -> FusionResult:
    """Voxel-wise fusion of warped atlas volumes.

    ``mean`` is ``weighted_mean`` with uniform weights. Accumulation runs in
    ascending atlas-id order so permuting the inputs leaves the result
    unchanged bit for bit. Means are clipped to the per-voxel input range to
    keep that bound exact under rounding. ``median`` takes the lower middle
    value for even counts.
    """
    warped = list(warped)
    if not warped:
        raise InvalidArgumentError("nothing to fuse")
    if method not in FUSION_METHODS:
        raise InvalidArgumentError(f"unknown fusion method {method!r}; expected one of {FUSION_METHODS}")
    first = warped[0]
    for v in warped[1:]:
        if not first.same_geometry(v):
            raise InvalidArgumentError("fused volumes must share geometry")
    n = len(warped)
    ids = tuple(str(i) for i in range(n)) if atlas_ids is None else tuple(str(i) for i in atlas_ids)
    if len(ids) != n or len(set(ids)) != n:
        raise InvalidArgumentError("atlas ids must be unique, one per volume")

    if method == "weighted_mean":
        if weights is None:
            raise InvalidArgumentError("weighted_mean needs weights")
        w = _normalised(weights, n)
    else:
        if weights is not None and method == "median":
            raise InvalidArgumentError("median fusion takes no weights")
        w = np.full(n, 1.0 / n)

    order = sorted(range(n), key=lambda i: ids[i])
    stack = np.stack([warped[i].data for i in order])
    if method == "median":
        data = np.sort(stack, axis=0)[(n - 1) // 2]
    else:
        data = np.zeros(first.dims)
        for k, i in enumerate(order):
            data += w[i] * stack[k]
        data = np.clip(data, stack.min(axis=0), stack.max(axis=0))
    mask = first.mask
    return FusionResult(first.with_data(data, mask), method, tuple(float(x) for x in w), ids)


def label_similarity_weights(warped_labels, fixed_labels) -> np.ndarray:
    """Weights proportional to each atlas's mean label Dice with the target.

    Falls back to uniform weights when every similarity is zero.
    """
    warped_labels = list(warped_labels)
    if not warped_labels:
        raise InvalidArgumentError("need at least one label map")
    scores = []
    for lm in warped_labels:
        if lm.dims != fixed_labels.dims:
            raise InvalidArgumentError(f"label map dims {lm.dims} differ from {fixed_labels.dims}")
        dice = hard_dice(lm, fixed_labels)
        scores.append(float(np.mean([dice[k] for k in sorted(dice)])) if dice else 0.0)
    scores = np.asarray(scores)
    if scores.sum() <= 0:
        return np.full(len(scores), 1.0 / len(scores))
    return scores / scores.sum()


@dataclass(eq=False)
class Synthesis:
    """Fused outputs per contrast, plus the registrations they were built from."""

    outputs: dict
    registrations: list
    registration_ids: tuple

    def __getitem__(self, name):
        return self.outputs[name]


def _atlas_ids(atlases):
    ids = tuple(a.atlas_id if a.atlas_id is not None else f"atlas{i:03d}" for i, a in enumerate(atlases))
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError(f"duplicate atlas ids: {ids}")
    return ids


def register_atlases(fixed: AtlasSubject, atlases, config=None, workers=1):
    """One registration per atlas, atlas primary onto target primary."""
    config = config or RegistrationConfig()
    if config.mode != "unsupervised":
        raise InvalidArgumentError("synthesis registers without the target's secondary contrasts; use unsupervised mode")
    return register_batch(fixed.as_subject(), [a.as_subject() for a in atlases], config, workers=workers)


def fuse_contrast(results, atlases, contrast_name, method="mean", fixed_labels=None, registration_ids=None):
    """Transfer ``contrast_name`` through existing registrations and fuse."""
    atlases = list(atlases)
    ids = _atlas_ids(atlases)
    warped = [transfer(r, a, contrast_name) for r, a in zip(results, atlases)]
    weights = None
    if method == "weighted_mean":
        if fixed_labels is None or any(a.labels is None for a in atlases):
            raise InvalidArgumentError("weighted_mean fusion needs labels on the target and every atlas")
        moved = [warp_labels(a.labels, r.displacement) for r, a in zip(results, atlases)]
        weights = label_similarity_weights(moved, fixed_labels)
    fused = fuse(warped, method, weights, ids)
    reg_ids = tuple(registration_ids) if registration_ids is not None else ()
    return FusionResult(fused.synthetic, fused.method, fused.weights, fused.atlas_ids, reg_ids)


def synthesize(fixed: AtlasSubject, atlases, contrast_names, fusion_method="mean", config=None, workers=1):
    """Synthesize one or more target contrasts from a set of atlases.

    Each atlas is registered exactly once and the resulting displacement
    is reused for every requested contrast.
    """
    atlases = list(atlases)
    if not atlases:
        raise InvalidArgumentError("need at least one atlas")
    names = [contrast_names] if isinstance(contrast_names, str) else list(contrast_names)
    if not names:
        raise InvalidArgumentError("need at least one contrast name")
    ids = _atlas_ids(atlases)
    for a in atlases:
        if a.primary_contrast.dims != fixed.primary_contrast.dims:
            raise InvalidArgumentError("atlas geometry differs from the target")
        for name in names:
            a.contrast(name)
    results = register_atlases(fixed, atlases, config, workers)
    reg_ids = tuple(f"reg:{i}" for i in ids)
    outputs = {
        name: fuse_contrast(results, atlases, name, fusion_method, fixed.labels, reg_ids) for name in names
    }
    return Synthesis(outputs, results, reg_ids)


def ti_contrast(atlas: AtlasSubject, ti, name=None, short=("wmn", WMN_TI), long=("csfn", CSFN_TI)):
    """Add a contrast at inversion time ``ti`` computed from two paired contrasts.

    ``(m0, t1)`` is fitted per voxel from the ``short`` and ``long``
    ``(contrast name, TI)`` pairs and fed back through the signal model.
    Voxels where both inputs are zero, or where no fit exists, stay zero.
    Returns a new atlas with the contrast added under ``name``.
    """
    s_short = atlas.contrast(short[0]).data
    s_long = atlas.contrast(long[0]).data
    out = np.zeros(s_short.shape)
    pairs = np.stack([s_short.ravel(), s_long.ravel()], axis=1)
    uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
    values = np.zeros(len(uniq))
    for k, (a, b) in enumerate(uniq):
        if a <= 0 and b <= 0:
            continue
        try:
            fit = estimate_ir_params(max(a, 0.0), short[1], max(b, 0.0), long[1])
        except FitFailure:
            continue
        values[k] = ir_signal(fit.m0, fit.t1, ti)
    out = values[inverse.ravel()].reshape(s_short.shape)
    name = name or f"ti{int(round(ti))}"
    contrasts = dict(atlas.secondary_contrasts)
    contrasts[name] = atlas.primary_contrast.with_data(out, atlas.primary_contrast.mask)
    return AtlasSubject(atlas.primary_contrast, contrasts, atlas.labels, atlas.primary_name, atlas.atlas_id)
