"""Training-free spectrogram region editing on diffusion latent grids.

The engine inverts spectrogram-derived latents into noise space, morphs
them on the noise sphere (SLERP addition, gradient-based removal), and
re-samples with energy guidance and attention key/value caching so edits
stay confined to a chosen time-frequency region.
"""

from morphix.latent_core import (
    DegenerateGeometryError,
    LatentGrid,
    MaskTransform,
    ShapeMismatchError,
    TFMask,
    apply_mask_transform,
    geodesic_distance,
    mask_downsample,
    slerp,
    tangent_project,
)
from morphix.sampling import (
    NoiseSchedule,
    SamplerConfig,
    cfg_combine,
    convert_prediction,
    ddim_invert_step,
    ddim_step,
    invert_loop,
    make_schedule,
    q_sample,
    sample_loop,
)

__all__ = [
    "DegenerateGeometryError",
    "LatentGrid",
    "MaskTransform",
    "NoiseSchedule",
    "SamplerConfig",
    "ShapeMismatchError",
    "TFMask",
    "apply_mask_transform",
    "cfg_combine",
    "convert_prediction",
    "ddim_invert_step",
    "ddim_step",
    "geodesic_distance",
    "invert_loop",
    "make_schedule",
    "mask_downsample",
    "q_sample",
    "sample_loop",
    "slerp",
    "tangent_project",
]

__version__ = "0.1.0"
