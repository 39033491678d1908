"""Variable-size 3D vision transformer with center-and-select positional embeddings.

Modules
-------
numerics   array kernels, forward/backward, seeded streams, VVT1 files
data       synthetic tumor-crop volumes, size bins, datasets on disk
patchify   fixed-size patch extraction and linear embedding
posemb     sinusoidal grids, center-and-select, interpolation, relative bias
encoder    the transformer, its manual backward pass, checkpoints
batching   custom batch sampler, gradient accumulation, pad-to-max plans
train      AdamW, warm-up + cosine schedule, weighted loss, metrics, epoch loop
bench      epoch timing and analytic token cost per batching mode
"""

from .encoder import ModelConfig, VariViT
from .posemb import build_sinusoidal_3d, center_and_select, interp_resize
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "VariViT",
    "build_sinusoidal_3d",
    "center_and_select",
    "interp_resize",
    "train_loop",
]
