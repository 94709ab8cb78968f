"""Denoising of diffusion-weighted MRI with angular block matching and
nonnegative sparse coding.

The pipeline stabilizes the magnitude noise bias, estimates a spatial
noise field, groups each diffusion direction with its nearest angular
neighbors, and denoises 4D blocks through a learned nonnegative
dictionary with locally bounded reconstruction error.
"""

__version__ = "0.1.0"

from .blocks import (
    AngularSubset,
    BlockConfig,
    PatchMatrix,
    angular_distance,
    assemble_block_matrix,
    build_subsets,
    find_neighbors,
    greedy_set_cover,
)
from .io import (
    GradientTable,
    Mask3D,
    Volume4D,
    read_gradients,
    read_mask,
    read_volume,
    write_volume,
)
from .metrics import QualityReport, psnr, quality_report, ssim
from .noise import (
    NoBackgroundError,
    NoiseField,
    PiesnoConfig,
    estimate_noise_field,
    estimate_sigma_piesno,
    fwhm_to_sigma_voxels,
    local_noise_variance,
    piesno_slice,
    snr_fixed_point,
)
from .reconstruct import (
    DenoiseConfig,
    aggregate_blocks,
    average_subset_outputs,
    nlsam_denoise,
)
from .simulate import NoiseSpec, add_noise, build_beta_field, crossing_phantom
from .sparse import (
    Dictionary,
    PenaltyRule,
    SparseCode,
    encode_bounded,
    load_dictionary,
    nn_lasso,
    save_dictionary,
    train_dictionary,
)
from .stabilization import (
    NcChiParams,
    StabilizationResult,
    estimate_signal,
    gaussian_icdf,
    magnitude_mean_factor,
    ncchi_cdf,
    ncchi_pdf,
    stabilize,
    stabilize_volume,
    variance_factor,
)

__all__ = [
    "__version__",
    "Volume4D",
    "Mask3D",
    "GradientTable",
    "read_volume",
    "write_volume",
    "read_mask",
    "read_gradients",
    "NcChiParams",
    "StabilizationResult",
    "ncchi_pdf",
    "ncchi_cdf",
    "gaussian_icdf",
    "magnitude_mean_factor",
    "variance_factor",
    "estimate_signal",
    "stabilize",
    "stabilize_volume",
    "NoiseField",
    "PiesnoConfig",
    "NoBackgroundError",
    "piesno_slice",
    "estimate_sigma_piesno",
    "local_noise_variance",
    "estimate_noise_field",
    "snr_fixed_point",
    "fwhm_to_sigma_voxels",
    "Dictionary",
    "SparseCode",
    "PenaltyRule",
    "nn_lasso",
    "train_dictionary",
    "encode_bounded",
    "save_dictionary",
    "load_dictionary",
    "BlockConfig",
    "AngularSubset",
    "PatchMatrix",
    "angular_distance",
    "find_neighbors",
    "build_subsets",
    "greedy_set_cover",
    "assemble_block_matrix",
    "aggregate_blocks",
    "average_subset_outputs",
    "nlsam_denoise",
    "DenoiseConfig",
    "NoiseSpec",
    "add_noise",
    "build_beta_field",
    "crossing_phantom",
    "QualityReport",
    "psnr",
    "ssim",
    "quality_report",
]
