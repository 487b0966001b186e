"""Medical image denoising by a sparse dictionary and a residual network whose
residues are fused and fed back into the dictionary."""

from .core import (ConfigError, DenoiseConfig, DenoiseError, ImageVolume, Modality, PatchGrid,
                   seeded_rng, split_rng, split_seed, validate_config)
from .dictionary import Dictionary, SparseCode, batch_encode, dct_init, ksvd_update, omp_encode
from .metrics import evaluate, psnr, rmse, ssim
from .noise import add_noise, add_poisson, add_rician, mri_phantom, shepp_logan
from .patching import PatchSet, assemble, decompose, make_grid
from .pipeline import PipelineReport, denoise_stack, denoise_volume

__version__ = "0.1.0"
