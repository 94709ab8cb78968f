"""Ground-truth comparison metrics: PSNR and SSIM.

PSNR uses the in-mask maximum of the reference as its peak and the
in-mask mean squared error across all volumes.  SSIM follows the
standard single-scale construction: 11-tap Gaussian window of width
1.5, stability constants K1=0.01 and K2=0.03, dynamic range equal to
the in-mask spread of the reference, evaluated on 2D axial slices per
volume and averaged over in-mask voxels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .io import Mask3D, Volume4D

__all__ = ["QualityReport", "psnr", "ssim"]

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_SIGMA = 1.5
_SSIM_TAPS = 11


@dataclass
class QualityReport:
    """Per-volume and mean metric values over a mask."""

    psnr_db: np.ndarray  # (V,)
    psnr_mean: float
    ssim: np.ndarray  # (V,)
    ssim_mean: float
    n_mask_voxels: int
    psnr_infinite: bool = False


def _check_pair(reference: Volume4D, test: Volume4D, mask: Mask3D | None):
    if reference.data.shape != test.data.shape:
        raise ValueError("reference and test must have identical dimensions")
    if mask is None:
        region = np.ones(reference.dims, dtype=bool)
    else:
        if mask.data.shape != reference.dims:
            raise ValueError("mask shape mismatch")
        region = mask.data
    if not region.any():
        raise ValueError("empty mask")
    return region


def psnr(reference: Volume4D, test: Volume4D, mask: Mask3D | None = None):
    """Peak signal-to-noise ratio in dB, overall and per volume.

    The peak is the in-mask maximum of the reference across all
    volumes.  Identical inputs produce an infinite overall value with
    the report flag set.
    """
    region = _check_pair(reference, test, mask)
    ref = reference.data[region]  # (n_mask, V)
    tst = test.data[region]
    peak = float(ref.max())
    if peak <= 0:
        raise ValueError("reference peak must be positive inside the mask")
    err = ref - tst
    mse_per_vol = np.mean(err * err, axis=0)
    mse = float(mse_per_vol.mean())

    def to_db(m):
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(peak * peak / m)

    per_vol = to_db(mse_per_vol)
    overall = float("inf") if mse == 0.0 else float(to_db(mse))
    return overall, per_vol, mse == 0.0


def _ssim_slice(ref2d, tst2d, dynamic_range):
    c1 = (_SSIM_K1 * dynamic_range) ** 2
    c2 = (_SSIM_K2 * dynamic_range) ** 2

    def win(img):
        return ndimage.gaussian_filter(
            img, _SSIM_SIGMA, truncate=((_SSIM_TAPS - 1) / 2) / _SSIM_SIGMA, mode="reflect"
        )

    mu1 = win(ref2d)
    mu2 = win(tst2d)
    mu1mu2 = mu1 * mu2
    mu1sq = mu1 * mu1
    mu2sq = mu2 * mu2
    s12 = win(ref2d * tst2d) - mu1mu2
    s11 = win(ref2d * ref2d) - mu1sq
    s22 = win(tst2d * tst2d) - mu2sq
    num = (2.0 * mu1mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1sq + mu2sq + c1) * (s11 + s22 + c2)
    return num / den


def ssim(reference: Volume4D, test: Volume4D, mask: Mask3D | None = None):
    """Mean structural similarity over in-mask voxels, per volume.

    Raises on a zero in-mask dynamic range of the reference.
    """
    region = _check_pair(reference, test, mask)
    ref_vals = reference.data[region]
    dynamic_range = float(ref_vals.max() - ref_vals.min())
    if dynamic_range <= 0:
        raise ValueError("reference has zero dynamic range inside the mask")
    nv = reference.n_volumes
    out = np.empty(nv)
    for v in range(nv):
        total = 0.0
        count = 0
        for z in range(reference.dims[2]):
            sel = region[:, :, z]
            if not sel.any():
                continue
            smap = _ssim_slice(
                reference.data[:, :, z, v], test.data[:, :, z, v], dynamic_range
            )
            total += float(smap[sel].sum())
            count += int(sel.sum())
        out[v] = total / count
    return out


def quality_report(
    reference: Volume4D, test: Volume4D, mask: Mask3D | None = None
) -> QualityReport:
    """Bundle PSNR and SSIM into one report."""
    region = _check_pair(reference, test, mask)
    overall, per_vol, flat = psnr(reference, test, mask)
    ss = ssim(reference, test, mask)
    return QualityReport(
        psnr_db=per_vol,
        psnr_mean=overall,
        ssim=ss,
        ssim_mean=float(ss.mean()),
        n_mask_voxels=int(region.sum()),
        psnr_infinite=flat,
    )


__all__.append("quality_report")
