"""Deterministic brain-like multi-contrast phantoms with known deformations.

Anatomy is built from nested ellipsoids: an outer CSF shell, a gray-matter
layer, white matter, two deep thalamus-like nuclei, a central ventricle and
a seeded set of small gray-matter blobs. Each contrast is the
inversion-recovery signal of the tissue at that contrast's TI.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import GenerationFailure, InvalidArgumentError
from .grid import LabelMap, Volume
from .irmodel import CSFN_TI, WMN_TI, ir_signal
from .sampler import identity_grid, warp, warp_labels
from .transform import DisplacementField, VelocityField, exponentiate, required_steps

BACKGROUND, CSF, GRAY, WHITE, THALAMUS = 0, 1, 2, 3, 4

DEFAULT_TISSUES = {
    "csf": (1.0, 4000.0),
    "gray": (0.85, 1200.0),
    "white": (0.75, 800.0),
    "thalamus": (0.8, 1000.0),
}
TISSUE_LABELS = {"csf": CSF, "gray": GRAY, "white": WHITE, "thalamus": THALAMUS}
DEFAULT_TIS = {"csfn": CSFN_TI, "wmn": WMN_TI}


@dataclass(frozen=True)
class DeformationSpec:
    smoothness: float = 8.0  # Gaussian sigma of the velocity noise, voxels
    magnitude: float = 5.0  # max velocity norm, voxels


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    seed: int = 0
    tissue_params: dict = field(default_factory=lambda: dict(DEFAULT_TISSUES))
    structures: int = 12
    structure_radius: Optional[tuple] = None  # voxels; None scales (2, 3) by min(dims) / 64
    deformation: DeformationSpec = DeformationSpec()
    noise_sigma: float = 0.02
    contrasts: dict = field(default_factory=lambda: dict(DEFAULT_TIS))
    primary: str = "csfn"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if isinstance(self.deformation, dict):
            object.__setattr__(self, "deformation", DeformationSpec(**self.deformation))
        params = {k: tuple(float(x) for x in v) for k, v in self.tissue_params.items()}
        object.__setattr__(self, "tissue_params", params)
        if self.structure_radius is not None:
            object.__setattr__(self, "structure_radius", tuple(float(r) for r in self.structure_radius))
        object.__setattr__(self, "contrasts", {k: float(v) for k, v in self.contrasts.items()})
        self.validate()

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 16:
            raise InvalidArgumentError(f"phantom dims must be 3 values >= 16, got {self.dims}")
        unknown = set(self.tissue_params) - set(TISSUE_LABELS)
        if unknown or len(self.tissue_params) != len(TISSUE_LABELS):
            raise InvalidArgumentError(f"tissue_params must define exactly {sorted(TISSUE_LABELS)}")
        t1s = [p[1] for p in self.tissue_params.values()]
        if len(set(t1s)) != len(t1s):
            raise InvalidArgumentError(f"tissue t1 values must be distinct: {t1s}")
        for name, (m0, t1) in self.tissue_params.items():
            if not (m0 > 0 and t1 > 0):
                raise InvalidArgumentError(f"tissue {name} needs positive m0 and t1")
        if self.deformation.magnitude < 0 or self.deformation.magnitude > min(self.dims) / 8:
            raise InvalidArgumentError(
                f"deformation magnitude must lie in [0, {min(self.dims) / 8}] voxels, "
                f"got {self.deformation.magnitude}"
            )
        if self.deformation.smoothness <= 0:
            raise InvalidArgumentError("deformation smoothness must be positive")
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be non-negative")
        if self.primary not in self.contrasts:
            raise InvalidArgumentError(f"primary contrast {self.primary!r} not among {sorted(self.contrasts)}")
        lo, hi = self.radius_range()
        if not 0 < lo <= hi:
            raise InvalidArgumentError(f"invalid structure radius range {self.structure_radius}")

    def radius_range(self):
        if self.structure_radius is not None:
            return self.structure_radius
        scale = min(self.dims) / 64.0
        return (2.0 * scale, 3.0 * scale)

    def to_dict(self):
        return {
            "dims": list(self.dims),
            "seed": self.seed,
            "tissue_params": {k: list(v) for k, v in self.tissue_params.items()},
            "structures": self.structures,
            "structure_radius": None if self.structure_radius is None else list(self.structure_radius),
            "deformation": {"smoothness": self.deformation.smoothness, "magnitude": self.deformation.magnitude},
            "noise_sigma": self.noise_sigma,
            "contrasts": dict(self.contrasts),
            "primary": self.primary,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "deformation" in d and isinstance(d["deformation"], dict):
            d["deformation"] = DeformationSpec(**d["deformation"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PhantomSubject:
    tissue_map: LabelMap
    contrasts: dict
    mask: np.ndarray
    primary: str = "csfn"
    true_displacement: Optional[DisplacementField] = None

    @property
    def primary_contrast(self):
        return self.contrasts[self.primary]

    def secondary_names(self):
        return [k for k in self.contrasts if k != self.primary]


def _ellipsoid(grid, center, radii):
    d = (grid - np.asarray(center)) / np.asarray(radii)
    return (d * d).sum(axis=-1) <= 1.0


def _anatomy(spec, rng):
    dims = np.asarray(spec.dims, dtype=np.float64)
    grid = identity_grid(spec.dims)
    center = (dims - 1) / 2.0
    head = 0.42 * dims * np.array([1.0, 0.92, 0.85])
    labels = np.zeros(spec.dims, dtype=np.int64)
    labels[_ellipsoid(grid, center, head)] = CSF
    labels[_ellipsoid(grid, center, 0.82 * head)] = GRAY
    white_radii = 0.62 * head
    labels[_ellipsoid(grid, center, white_radii)] = WHITE

    offset = np.array([0.11, 0.0, 0.0]) * dims
    thal_radii = np.array([0.09, 0.1, 0.08]) * dims
    for sign in (-1.0, 1.0):
        labels[_ellipsoid(grid, center + sign * offset, thal_radii)] = THALAMUS
    vent_center = center + np.array([0.0, 0.0, 0.1]) * dims
    vent_radii = np.array([0.05, 0.15, 0.05]) * dims
    labels[_ellipsoid(grid, vent_center, vent_radii)] = CSF

    # seeded small structures: sulcus-like CSF pockets cut into the gray
    # layer, and gray islands inside white matter; they break the rotational
    # symmetry of the nested shells
    lo, hi = spec.radius_range()
    n_sulci = spec.structures // 2
    n_islands = spec.structures - n_sulci
    placed_sulci = placed_islands = 0
    for _ in range(100 * max(spec.structures, 1)):
        if placed_sulci == n_sulci and placed_islands == n_islands:
            break
        radius = rng.uniform(lo, hi)
        if placed_sulci < n_sulci:
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            pos = center + 0.82 * head * direction
            blob = _ellipsoid(grid, pos, [radius] * 3)
            halo = _ellipsoid(grid, pos, [radius + 1.0] * 3)
            if not np.any(np.isin(labels[halo], (THALAMUS, CSF + 100))):
                labels[blob & (labels == GRAY)] = CSF + 100
                placed_sulci += 1
            continue
        pos = center + rng.uniform(-1, 1, 3) * (white_radii - radius - 1)
        blob = _ellipsoid(grid, pos, [radius] * 3)
        halo = _ellipsoid(grid, pos, [radius + 1.0] * 3)
        if np.all(labels[halo] == WHITE):
            labels[blob] = GRAY
            placed_islands += 1
    labels[labels == CSF + 100] = CSF
    placed = placed_sulci + placed_islands
    if placed < spec.structures:
        raise GenerationFailure(f"could only place {placed} of {spec.structures} structures")
    return labels


def _render(spec, labels):
    contrasts = {}
    for name, ti in spec.contrasts.items():
        img = np.zeros(spec.dims)
        for tissue, (m0, t1) in spec.tissue_params.items():
            img[labels == TISSUE_LABELS[tissue]] = ir_signal(m0, t1, ti)
        contrasts[name] = img
    return contrasts


def add_noise(subject: PhantomSubject, sigma: float, seed: int) -> PhantomSubject:
    """Add seeded Gaussian noise inside the foreground.

    ``sigma`` is a fraction of each contrast's intensity range.
    """
    if sigma == 0:
        return subject
    rng = np.random.default_rng([int(seed), 0x6E6F])
    contrasts = {}
    for name in sorted(subject.contrasts):
        vol = subject.contrasts[name]
        spread = float(vol.data.max() - vol.data.min())
        noise = rng.standard_normal(vol.dims) * (sigma * spread)
        contrasts[name] = vol.with_data(np.where(subject.mask, vol.data + noise, vol.data), vol.mask)
    contrasts = {k: contrasts[k] for k in subject.contrasts}
    return replace(subject, contrasts=contrasts)


def generate(spec: PhantomSpec) -> PhantomSubject:
    """Build the phantom for ``spec``; identical specs give identical subjects."""
    spec.validate()
    rng = np.random.default_rng([int(spec.seed), 0x616E])
    labels = _anatomy(spec, rng)
    mask = labels > 0
    tissue_map = LabelMap(labels)
    contrasts = {name: Volume(img, mask=mask) for name, img in _render(spec, labels).items()}
    subject = PhantomSubject(tissue_map, contrasts, mask, spec.primary)
    return add_noise(subject, spec.noise_sigma, spec.seed)


def random_velocity(dims, deformation: DeformationSpec, seed: int) -> VelocityField:
    """Gaussian-smoothed white noise, tapered to zero at the grid border.

    The field is scaled so its largest vector norm equals the requested
    magnitude.
    """
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng([int(seed), 0x7666])
    vec = np.stack(
        [gaussian_filter(rng.standard_normal(dims), deformation.smoothness, mode="wrap") for _ in range(3)],
        axis=-1,
    )
    taper = np.ones(dims)
    for axis, n in enumerate(dims):
        profile = np.sin(np.pi * np.arange(n) / (n - 1))
        shape = [1, 1, 1]
        shape[axis] = n
        taper = taper * profile.reshape(shape)
    vec *= taper[..., None]
    peak = float(np.sqrt((vec ** 2).sum(axis=-1)).max())
    if peak == 0 or deformation.magnitude == 0:
        return VelocityField.zeros(dims)
    return VelocityField(vec * (deformation.magnitude / peak))


def deform_subject(s: PhantomSubject, deformation: DeformationSpec, seed: int, exp_steps: int = 8) -> PhantomSubject:
    """Warp every contrast and the labels by a seeded smooth diffeomorphism.

    The result satisfies ``result(x) = s(x + true_displacement(x))``.
    """
    if deformation.magnitude < 0:
        raise InvalidArgumentError("deformation magnitude must be non-negative")
    dims = s.tissue_map.dims
    velocity = random_velocity(dims, deformation, seed)
    steps = max(exp_steps, required_steps(velocity))
    u = exponentiate(velocity, steps)
    if deformation.magnitude == 0:
        return replace(s, true_displacement=u)
    tissue_map = warp_labels(s.tissue_map, u)
    mask = tissue_map.labels > 0
    contrasts = {}
    for name, vol in s.contrasts.items():
        moved = warp(vol, u)
        contrasts[name] = moved.with_data(moved.data, mask)
    return PhantomSubject(tissue_map, contrasts, mask, s.primary, u)


def generate_cohort(spec: PhantomSpec, n: int):
    """``n`` subjects sharing one anatomy, each with its own deformation and noise.

    Subject ``i`` is the noiseless anatomy deformed with seed ``spec.seed + i``,
    then given independent noise drawn with that same seed.
    """
    if n < 1:
        raise InvalidArgumentError(f"cohort size must be at least 1, got {n}")
    base = generate(replace(spec, noise_sigma=0.0))
    cohort = []
    for i in range(n):
        seed = spec.seed + i
        subject = deform_subject(base, spec.deformation, seed)
        cohort.append(add_noise(subject, spec.noise_sigma, seed))
    return cohort
