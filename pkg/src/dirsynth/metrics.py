"""Image-quality and overlap metrics restricted to a foreground mask.

PSNR uses the masked maximum of the reference as its peak. SSIM is the
volumetric variant with an 11-voxel Gaussian window (sigma 1.5) and the
usual stabilisers ``C1 = (0.01 L)^2``, ``C2 = (0.03 L)^2`` where ``L`` is the
reference intensity range over the mask. The local SSIM map is defined only
at voxels whose whole window lies inside the volume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation, correlate1d

from .errors import DegenerateInputError, InvalidArgumentError

PSNR_IDENTICAL = math.inf

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr: float
    ssim: float
    dice_per_label: dict = field(default_factory=dict)
    mask_voxels: int = 0

    def __post_init__(self):
        if self.mask_voxels <= 0:
            raise InvalidArgumentError("a metric report needs a non-empty mask")
        for label, value in self.dice_per_label.items():
            if not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"dice for label {label} out of [0, 1]: {value}")

    @property
    def mean_dice(self):
        if not self.dice_per_label:
            return math.nan
        return float(np.mean([self.dice_per_label[k] for k in sorted(self.dice_per_label)]))


def _data(v):
    return np.asarray(getattr(v, "data", v), dtype=np.float64)


def default_mask(reference):
    """Voxels brighter than 1% of the reference maximum, dilated by one voxel."""
    ref = _data(reference)
    return binary_dilation(ref > 0.01 * ref.max())


def _resolve_mask(reference, test, mask):
    ref, tst = _data(reference), _data(test)
    if ref.shape != tst.shape:
        raise InvalidArgumentError(f"dims differ: {ref.shape} vs {tst.shape}")
    if mask is None:
        mask = default_mask(ref)
    m = np.asarray(getattr(mask, "data", mask), dtype=bool)
    if m.shape != ref.shape:
        raise InvalidArgumentError(f"mask dims {m.shape} differ from volume dims {ref.shape}")
    if not m.any():
        raise InvalidArgumentError("mask is empty")
    return ref, tst, m


def psnr(reference, test, mask=None) -> float:
    """Masked peak signal-to-noise ratio in dB.

    Returns ``inf`` when the two volumes agree on every masked voxel.
    """
    ref, tst, m = _resolve_mask(reference, test, mask)
    peak = float(ref[m].max())
    if peak <= 0.0:
        raise DegenerateInputError("reference has no positive intensity inside the mask")
    err = float(np.mean((ref[m] - tst[m]) ** 2))
    if err == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalised 1D Gaussian taps; the 3D window is their outer product."""
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _local_mean(a, taps):
    for axis in range(3):
        a = correlate1d(a, taps, axis=axis, mode="constant")
    return a


def ssim_map(reference, test, data_range, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Local SSIM at every voxel whose window fits in the volume.

    Returns ``(values, valid)``; ``values`` is zero where ``valid`` is False.
    """
    ref, tst = _data(reference), _data(test)
    if min(ref.shape) < window:
        raise InvalidArgumentError(f"volume {ref.shape} is smaller than the {window}-voxel window")
    taps = gaussian_window(window, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _local_mean(ref, taps)
    mu_y = _local_mean(tst, taps)
    xx = _local_mean(ref * ref, taps) - mu_x * mu_x
    yy = _local_mean(tst * tst, taps) - mu_y * mu_y
    xy = _local_mean(ref * tst, taps) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)

    r = window // 2
    valid = np.zeros(ref.shape, dtype=bool)
    valid[r:-r, r:-r, r:-r] = True
    values = np.zeros(ref.shape)
    values[valid] = num[valid] / den[valid]
    return values, valid


def ssim(reference, test, mask=None, data_range=None) -> float:
    """Mean local SSIM over masked voxels that are valid window centres.

    ``data_range`` defaults to the reference range over the mask.
    """
    ref, tst, m = _resolve_mask(reference, test, mask)
    if data_range is None:
        data_range = float(ref[m].max() - ref[m].min())
    if not data_range > 0:
        raise DegenerateInputError("reference intensity range over the mask is zero")
    values, valid = ssim_map(ref, tst, data_range)
    use = m & valid
    if not use.any():
        raise InvalidArgumentError("mask contains no voxel whose SSIM window fits in the volume")
    return float(np.mean(values[use]))


def hard_dice(a, b) -> dict:
    """Per-label Dice overlap for every non-background label in either map."""
    la, lb = np.asarray(getattr(a, "labels", a)), np.asarray(getattr(b, "labels", b))
    if la.shape != lb.shape:
        raise InvalidArgumentError(f"label map dims differ: {la.shape} vs {lb.shape}")
    out = {}
    for label in np.union1d(np.unique(la), np.unique(lb)):
        if label == 0:
            continue
        in_a, in_b = la == label, lb == label
        out[int(label)] = 2.0 * np.count_nonzero(in_a & in_b) / (np.count_nonzero(in_a) + np.count_nonzero(in_b))
    return out


def evaluate(reference, test, mask=None, reference_labels=None, test_labels=None) -> MetricReport:
    """PSNR, SSIM and (when both label maps are given) per-label Dice."""
    ref, tst, m = _resolve_mask(reference, test, mask)
    dice = {}
    if reference_labels is not None and test_labels is not None:
        dice = hard_dice(reference_labels, test_labels)
    return MetricReport(psnr(ref, tst, m), ssim(ref, tst, m), dice, int(m.sum()))
