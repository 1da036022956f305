"""Multi-resolution diffeomorphic registration by gradient descent.

The velocity field starts at zero on the coarsest pyramid level. Each
iteration exponentiates it, warps the moving inputs, evaluates the
configured energy and takes a step along the negative gradient, scaled so
the largest voxel update equals the step size. Between levels the velocity
is upsampled and its vectors rescaled to the finer grid.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DirSynthError, InvalidArgumentError, NumericalFailure
from .grid import LabelMap, Volume, downsample, downsample_labels
from .objective import LossConfig, build_state, evaluate, label_channels
from .sampler import warp
from .transform import (
    DEFAULT_EXP_STEPS,
    DisplacementField,
    VelocityField,
    exponentiate,
    required_steps,
    upsample_field,
)

log = logging.getLogger(__name__)

CONVERGENCE_WINDOW = 5


@dataclass(frozen=True)
class RegistrationConfig:
    loss: LossConfig = field(default_factory=LossConfig.unsupervised)
    pyramid_schedule: tuple = (4, 2, 1)
    iterations_per_level: tuple = (100, 100, 50)
    step_size: float = 0.5
    step_decay: float = 1.0
    convergence_tol: float = 1e-4
    exp_steps: int = DEFAULT_EXP_STEPS
    mode: str = "unsupervised"
    seed: int = 0
    gradient_sigma: float = 8.0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        object.__setattr__(self, "pyramid_schedule", tuple(int(f) for f in self.pyramid_schedule))
        object.__setattr__(self, "iterations_per_level", tuple(int(n) for n in self.iterations_per_level))
        if len(self.pyramid_schedule) != len(self.iterations_per_level):
            raise InvalidArgumentError("pyramid_schedule and iterations_per_level must have equal length")
        if not self.pyramid_schedule or self.pyramid_schedule[-1] != 1:
            raise InvalidArgumentError("pyramid_schedule must end with factor 1")
        if any(a < b for a, b in zip(self.pyramid_schedule, self.pyramid_schedule[1:])):
            raise InvalidArgumentError("pyramid factors must be non-increasing toward fine levels")
        if any(n < 1 for n in self.iterations_per_level):
            raise InvalidArgumentError("iterations_per_level entries must be positive")
        if not self.step_size > 0:
            raise InvalidArgumentError("step_size must be positive")
        if not 0 < self.step_decay <= 1:
            raise InvalidArgumentError("step_decay must lie in (0, 1]")
        if not self.convergence_tol > 0:
            raise InvalidArgumentError("convergence_tol must be positive")
        if int(self.exp_steps) != self.exp_steps or self.exp_steps < 1:
            raise InvalidArgumentError("exp_steps must be a positive integer")
        if self.gradient_sigma < 0:
            raise InvalidArgumentError("gradient_sigma must be non-negative")
        if self.mode not in ("unsupervised", "supervised"):
            raise InvalidArgumentError(f"mode must be 'unsupervised' or 'supervised', got {self.mode!r}")
        if self.mode == "supervised" and self.loss.term("mse", "secondary_contrast") is None \
                and self.loss.term("ncc", "secondary_contrast") is None:
            raise InvalidArgumentError("supervised mode needs a secondary_contrast loss term")

    @classmethod
    def supervised(cls, secondary_weight=1.0, **kwargs):
        return cls(loss=LossConfig.supervised(secondary_weight), mode="supervised", **kwargs)

    def to_dict(self):
        return {
            "loss": self.loss.to_dict(),
            "pyramid_schedule": list(self.pyramid_schedule),
            "iterations_per_level": list(self.iterations_per_level),
            "step_size": self.step_size,
            "step_decay": self.step_decay,
            "convergence_tol": self.convergence_tol,
            "exp_steps": self.exp_steps,
            "mode": self.mode,
            "seed": self.seed,
            "gradient_sigma": self.gradient_sigma,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class Subject:
    """One side of a registration: the primary image, labels and an optional paired contrast."""

    image: Volume
    labels: Optional[LabelMap] = None
    secondary: Optional[Volume] = None


@dataclass(eq=False)
class RegistrationResult:
    displacement: DisplacementField
    velocity: VelocityField
    loss_trace: list  # one list of totals per pyramid level, coarsest first
    converged: bool
    final_loss: float
    initial_loss: float  # zero-velocity energy on the finest level
    wall_time: float = field(default=0.0, compare=False)

    def same_as(self, other) -> bool:
        """Bitwise equality of everything except wall time."""
        return (
            np.array_equal(self.displacement.vectors, other.displacement.vectors)
            and np.array_equal(self.velocity.vectors, other.velocity.vectors)
            and self.loss_trace == other.loss_trace
            and self.converged == other.converged
            and self.final_loss == other.final_loss
        )


def _as_subject(x):
    return x if isinstance(x, Subject) else Subject(x)


def _smooth(grad, sigma):
    if sigma <= 0:
        return grad
    return np.stack([gaussian_filter(grad[..., k], sigma, mode="nearest") for k in range(3)], axis=-1)


class _Level:
    """Inputs of one pyramid level, with label one-hots prepared once."""

    def __init__(self, fixed, moving, supervision, factor, config):
        self.factor = factor
        self.fixed_image = downsample(fixed.image, factor)
        self.moving_image = downsample(moving.image, factor)
        self.dims = self.fixed_image.dims
        targets = config.loss.targets()
        self.channels = None
        if "labels" in targets and any(t.weight > 0 for t in config.loss.terms if t.kind == "dice"):
            fl = downsample_labels(fixed.labels, factor)
            ml = downsample_labels(moving.labels, factor)
            self.channels = label_channels(fl, ml, config.loss.dice_sigma / factor)
        self.fixed_secondary = self.moving_secondary = None
        if supervision is not None and "secondary_contrast" in targets:
            self.fixed_secondary = downsample(supervision[0], factor)
            self.moving_secondary = downsample(supervision[1], factor)

    def energy(self, config, velocity, steps):
        u = exponentiate(velocity, steps)
        state = build_state(
            u,
            velocity,
            fixed_primary=self.fixed_image,
            moving_primary=self.moving_image,
            fixed_secondary=self.fixed_secondary,
            moving_secondary=self.moving_secondary,
            channels=self.channels,
        )
        return evaluate(config.loss, state)


def _validate(fixed, moving, supervision, config):
    if fixed.image.dims != moving.image.dims or not np.allclose(fixed.image.spacing, moving.image.spacing):
        raise InvalidArgumentError(
            f"fixed {fixed.image.dims}/{fixed.image.spacing} and moving "
            f"{moving.image.dims}/{moving.image.spacing} geometry differ"
        )
    needs_labels = any(t.kind == "dice" and t.weight > 0 for t in config.loss.terms)
    if needs_labels:
        for who, s in (("fixed", fixed), ("moving", moving)):
            if s.labels is None:
                raise InvalidArgumentError(f"dice loss needs {who} labels")
            if s.labels.dims != s.image.dims:
                raise InvalidArgumentError(f"{who} labels dims {s.labels.dims} differ from image {s.image.dims}")
    if config.mode == "supervised":
        if supervision is None:
            raise InvalidArgumentError("supervised mode needs a (fixed_secondary, moving_secondary) pair")
        for vol in supervision:
            if vol.dims != fixed.image.dims:
                raise InvalidArgumentError(f"secondary volume dims {vol.dims} differ from {fixed.image.dims}")


def register(fixed, moving, config: RegistrationConfig = None, supervision=None) -> RegistrationResult:
    """Estimate the displacement aligning ``moving`` to ``fixed``.

    ``fixed`` and ``moving`` are :class:`Subject` instances (a bare
    :class:`Volume` is accepted when no label term is configured).
    ``supervision`` is the ``(fixed_secondary, moving_secondary)`` pair used
    by supervised mode; if omitted, the subjects' ``secondary`` volumes are
    used. The result satisfies ``warp(moving, displacement) ≈ fixed``.
    """
    config = config or RegistrationConfig()
    fixed, moving = _as_subject(fixed), _as_subject(moving)
    if config.mode == "supervised" and supervision is None and fixed.secondary is not None:
        supervision = (fixed.secondary, moving.secondary)
    if config.mode == "unsupervised":
        supervision = None
    _validate(fixed, moving, supervision, config)

    start = time.perf_counter()
    trace = []
    converged = True
    velocity = None
    previous_factor = None
    initial_loss = final_loss = None
    n_levels = len(config.pyramid_schedule)
    for index, (factor, budget) in enumerate(zip(config.pyramid_schedule, config.iterations_per_level)):
        level = _Level(fixed, moving, supervision, factor, config)
        if velocity is None:
            velocity = VelocityField.zeros(level.dims, level.fixed_image.spacing)
        elif level.dims != velocity.dims:
            ratio = previous_factor / factor
            velocity = VelocityField(upsample_field(velocity.vectors, level.dims, ratio), level.fixed_image.spacing)
        previous_factor = factor
        step = config.step_size * config.step_decay ** index
        finest = index == n_levels - 1

        best_total, best_velocity = np.inf, velocity
        if finest:
            zero = VelocityField.zeros(level.dims, velocity.spacing)
            initial_loss = level.energy(config, zero, config.exp_steps).total
            best_total, best_velocity = initial_loss, zero

        totals = []
        level_converged = False
        for iteration in range(budget):
            steps = max(config.exp_steps, required_steps(velocity))
            report = level.energy(config, velocity, steps)
            if not np.isfinite(report.total) or not np.all(np.isfinite(report.gradient)):
                raise NumericalFailure(
                    f"non-finite loss at level {index} iteration {iteration}", iteration=iteration, level=index
                )
            totals.append(report.total)
            if report.total < best_total:
                best_total, best_velocity = report.total, velocity
            if len(totals) > CONVERGENCE_WINDOW:
                ref = totals[-1 - CONVERGENCE_WINDOW]
                if abs(ref - totals[-1]) <= config.convergence_tol * max(abs(ref), 1e-300):
                    level_converged = True
                    break
            direction = _smooth(report.gradient, config.gradient_sigma)
            peak = float(np.sqrt((direction ** 2).sum(axis=-1)).max())
            if peak == 0.0:
                level_converged = True
                break
            velocity = VelocityField(velocity.vectors - (step / peak) * direction, velocity.spacing)
        trace.append(totals)
        converged = level_converged
        velocity = best_velocity
        final_loss = best_total
        log.debug("level %d (factor %d): %d iterations, loss %.6g", index, factor, len(totals), best_total)

    steps = max(config.exp_steps, required_steps(velocity))
    displacement = exponentiate(velocity, steps)
    return RegistrationResult(
        displacement=displacement,
        velocity=velocity,
        loss_trace=trace,
        converged=converged,
        final_loss=final_loss,
        initial_loss=initial_loss,
        wall_time=time.perf_counter() - start,
    )


def _register_job(args):
    index, fixed, moving, config, supervision = args
    try:
        return register(fixed, moving, config, supervision)
    except DirSynthError as exc:
        exc.args = (f"mover {index}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
        exc.index = index
        raise


def register_batch(fixed, movers, config: RegistrationConfig = None, supervision=None, workers=1):
    """Register every mover to ``fixed``; results keep the input order.

    ``supervision`` is an optional list of per-mover pairs. Errors carry
    the failing mover's index. Results do not depend on ``workers``.
    """
    config = config or RegistrationConfig()
    movers = list(movers)
    sup = list(supervision) if supervision is not None else [None] * len(movers)
    if len(sup) != len(movers):
        raise InvalidArgumentError("supervision list length differs from movers")
    jobs = [(i, fixed, m, config, s) for i, (m, s) in enumerate(zip(movers, sup))]
    if workers <= 1 or len(jobs) <= 1:
        return [_register_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_register_job, jobs))


def warped_primary(result: RegistrationResult, moving) -> Volume:
    return warp(_as_subject(moving).image, result.displacement)
