"""Certified worst-case output error for weight-quantized networks.

The pipeline: describe a network (model), measure per-stage operator
norms (norms), quantize the weights (quantize), evaluate the certified
deviation bounds (bounds), and sanity-check them against sampled reality
(infer).  The qbound CLI strings these together.
"""

from .bounds import (
    BoundReport,
    BoundValue,
    PreconditionError,
    applicable_bound_name,
    bound_conv,
    bound_max_norm,
    bound_mean_norm,
    bound_no_bias,
    bound_path_norm,
    build_report,
    conv_ratio_log10,
    layerwise_decomposition,
    new_bound,
    r_conv,
    r_max,
    r_mean,
    ratio_log10,
)
from .infer import Sampler, accuracy, empirical_sup_error, forward, forward_batch
from .kernels import BACKEND, HAVE_EXT
from .model import (
    ACTIVATION_KINDS,
    Activation,
    AvgPool,
    Bottleneck,
    Conv2d,
    Dataset,
    Dense,
    Flatten,
    ManifestError,
    NetworkSpec,
    ResBlock,
    ValidationError,
    builtin_architecture,
    load_dataset,
    load_model,
    random_weights,
    save_dataset,
    save_model,
    trace_shapes,
    validate,
    zero_weights,
)
from .norms import (
    NormProfile,
    SizeCapError,
    StageNorm,
    block_stage_norms,
    bottleneck_v_matrices,
    conv_norm_implicit,
    dense_norm,
    materialize_block,
    merge_profiles,
    output_norm_bound,
    profile_of,
    residual_v_matrices,
    staged_forward,
    toeplitz_matrix,
)
from .quantize import (
    AdaRoundParams,
    QuantConfig,
    adaround_layer,
    cle_equalize_pair,
    cle_network,
    quantize_floor,
    quantize_network,
    quantize_round,
    step_size,
)
from .tensor import DimensionError, Tensor, matvec, opnorm_inf

__version__ = "0.1.0"
