"""Rotation-based post-training quantization with blockwise bias correction,
asymmetric scaling, and a quantization-error analysis suite."""

from .analysis import (
    BlockMse,
    ErrorReport,
    SiteRecord,
    clipping_energy,
    emit_report,
    gaussian_clip_energy,
    noise_propagation,
    optimal_scale,
    variance_decomposition,
)
from .bundle_io import (
    BundleFormatError,
    ConfigError,
    RunConfig,
    read_bundle,
    read_calibration,
    read_params,
    read_report,
    write_bundle,
    write_calibration,
    write_params,
    write_report,
)
from .model import (
    BlockParams,
    BlockWeights,
    ModelBundle,
    ModelConfig,
    QuantConfig,
    SynthSpec,
    build_toy_model,
    effective_weights,
    fold_norms,
    forward_fp,
    forward_quant,
    fuse_rres,
    gen_calibration,
    gen_synthetic,
)
from .optim import OptimSchedule, OptimizationError, ParamGroup, cosine_lr, optimize
from .pipeline import (
    ABLATION_MODES,
    PipelineConfig,
    PipelineResult,
    StageSchedule,
    ablate,
    compute_rres,
    prepare_bundle,
    quantize_blockwise,
    run_pipeline,
)
from .quantizers import (
    QuantParams,
    QuantSpec,
    QuantizationError,
    fake_quantize,
    gptq_quantize,
    quant_proxy_loss,
    quantize_dynamic,
    resolve_params,
    rtn_quantize,
    search_clip,
)
from .stats import ChannelStats, channel_stats
from .transforms import (
    CayleyParam,
    ComposedRotation,
    MatrixRotation,
    RandomHadamard,
    Rotation,
    SylvesterHadamard,
    cayley,
    compose_rres,
    fwht,
    hadamard_matrix,
    jacobi_eigh,
    pca_basis,
    random_hadamard,
)

__version__ = "0.1.0"
