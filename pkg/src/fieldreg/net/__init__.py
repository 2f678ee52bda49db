"""Registration block networks with hand-written reverse-mode gradients."""

from .blocks import (  # noqa: F401
    AFFINE_PARAM_COUNT,
    BlockWeights,
    LayerSpec,
    TapeContext,
    affine_forward,
    affine_layers,
    backward,
    deformable_forward,
    deformable_layers,
    encoder_stage_dims,
    init_weights,
)
from .weights_io import load_block, save_block  # noqa: F401
