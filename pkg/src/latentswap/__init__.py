"""latentswap: targeted swapping of diffusion U-Net variables on a small
deterministic attention U-Net, with masked blending, Masked-AdaIN style
adaptation, shape guidance, and DDIM/null-text inversion."""

from .adapt import (ShapeConfig, ShapeEnergy, aggregate_shape, extract_shape,
                    masked_adain, masked_stats, shape_energy)
from .denoiser import (ConditioningSet, Denoiser, DenoiserConfig, UNetTrace,
                       VariableOverride, init_weights)
from .errors import (ConfigError, LatentSwapError, NumericError,
                     ReconstructionError)
from .masks import (AnnealSchedule, VariableDescriptor, anneal, dilate,
                    feather, fit_to, load_binary_mask)
from .numerics import (FLOAT, SeededRng, conv2d, gaussian_kernel,
                       resize_bilinear, softmax_rows)
from .pipeline import (PipelineConfig, decode, encode, first_principal_component,
                       make_conditioning)
from .scheduler import (NoiseSchedule, SamplerConfig, Trajectory, cfg_eps,
                        ddim_invert, ddim_invert_step, ddim_step, guided_eps,
                        make_schedule, null_text_optimize, sample)
from .swap import (SourceTrace, SwapController, SwapPlan, SwapSchedule,
                   blend_variable, blend_with_adain, multi_swap, record_source,
                   swap_generate)
from .tensorio import (load_concept, load_tensor, load_weights, save_concept,
                       save_tensor, save_weights)

__version__ = "0.1.0"

__all__ = [
    "AnnealSchedule", "ConditioningSet", "ConfigError", "Denoiser",
    "DenoiserConfig", "FLOAT", "LatentSwapError", "NoiseSchedule",
    "NumericError", "PipelineConfig", "ReconstructionError", "SamplerConfig",
    "SeededRng", "ShapeConfig", "ShapeEnergy", "SourceTrace", "SwapController",
    "SwapPlan", "SwapSchedule", "Trajectory", "UNetTrace",
    "VariableDescriptor", "VariableOverride", "aggregate_shape", "anneal",
    "blend_variable", "blend_with_adain", "cfg_eps", "conv2d", "ddim_invert",
    "ddim_invert_step", "ddim_step", "decode", "dilate", "encode",
    "extract_shape", "feather", "first_principal_component", "fit_to",
    "gaussian_kernel", "guided_eps", "init_weights", "load_binary_mask",
    "load_concept", "load_tensor", "load_weights", "make_conditioning",
    "make_schedule", "masked_adain", "masked_stats", "multi_swap",
    "null_text_optimize",
    "record_source", "resize_bilinear", "sample", "save_concept",
    "save_tensor", "save_weights", "shape_energy", "softmax_rows",
    "swap_generate",
]
