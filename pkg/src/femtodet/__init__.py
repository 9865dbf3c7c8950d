"""Energy-aware tiny-detector toolkit.

Building blocks: a minimal NCHW autodiff core, boundary-enhanced
depthwise-separable blocks that fold back to plain DSC at inference, a
single-output fusion neck, a staged-augmentation training scheduler, and
energy/cost accounting (watts from traces, mean-performance-per-watt, and an
analytical MAC/traffic model).
"""

from .tensor import (
    BatchNormParams,
    ConvSpec,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    bce_with_logits,
    conv2d,
    conv_forward,
    grad_check,
    make_batch_norm,
    make_conv,
    no_grad,
    parameter,
    relu,
    sigmoid,
    tensor,
    upsample_nearest,
)
from .ibe import IBEModule, derive_descriptor, derive_projector, ibe_forward, make_ibe
from .fold import FoldReport, add_affine, embed_kernel, fold_bn_into_conv, fold_ibe, scale_affine, verify_fold
from .model import (
    BackboneRow,
    Detection,
    FemtoNet,
    HeadMaps,
    ModelConfig,
    ParamReport,
    count_params,
    decode_boxes,
    decode_grid,
    default_config,
    fold_model,
    nms,
)

__version__ = "0.1.0"
