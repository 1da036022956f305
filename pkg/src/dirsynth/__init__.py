"""Registration-based image synthesis.

Estimate a diffeomorphic transform between two images of one contrast,
carry paired contrasts of the moving subject through it, fuse several such
atlases, and evaluate the result with masked PSNR, SSIM and Dice.
"""

from .errors import (
    CorruptFileError,
    DegenerateInputError,
    DirSynthError,
    FitFailure,
    FormatError,
    GenerationFailure,
    InvalidArgumentError,
    NumericalFailure,
    PreconditionError,
    UnsupportedFormatError,
)
from .grid import LabelMap, Volume, build_pyramid, downsample, downsample_labels
from .irmodel import IrSignalParams, estimate_ir_params, ir_signal, null_ti
from .metrics import MetricReport, hard_dice, psnr, ssim
from .objective import LossConfig, LossTerm
from .registration import RegistrationConfig, RegistrationResult, Subject, register, register_batch
from .sampler import warp, warp_labels
from .synthesis import AtlasSubject, FusionResult, fuse, label_similarity_weights, synthesize, transfer
from .transform import DisplacementField, VelocityField, compose, exponentiate, jacobian_determinant

__version__ = "0.1.0"

__all__ = [
    "CorruptFileError",
    "DegenerateInputError",
    "DirSynthError",
    "FitFailure",
    "FormatError",
    "GenerationFailure",
    "InvalidArgumentError",
    "NumericalFailure",
    "PreconditionError",
    "UnsupportedFormatError",
    "LabelMap",
    "Volume",
    "build_pyramid",
    "downsample",
    "downsample_labels",
    "IrSignalParams",
    "estimate_ir_params",
    "ir_signal",
    "null_ti",
    "MetricReport",
    "hard_dice",
    "psnr",
    "ssim",
    "LossConfig",
    "LossTerm",
    "RegistrationConfig",
    "RegistrationResult",
    "Subject",
    "register",
    "register_batch",
    "warp",
    "warp_labels",
    "AtlasSubject",
    "FusionResult",
    "fuse",
    "label_similarity_weights",
    "synthesize",
    "transfer",
    "DisplacementField",
    "VelocityField",
    "compose",
    "exponentiate",
    "jacobian_determinant",
]
