"""Joint object category and viewpoint estimation with view-specific kernels.

The package is organized around six pieces: a small float64 autodiff
engine (``tensor``), the reflection-tied cylindrical kernel
(``cylinder``), the prediction head with viewpoint-weighted category
scoring and sinusoidal soft-argmax (``head``), a deterministic synthetic
wireframe dataset (``synth``), training/evaluation/ablation machinery
(``trainer``), and bit-exact file formats plus the CLI (``fileio``,
``cli``).
"""

from .cylinder import (
    CylindricalKernel,
    ViewFeatures,
    build_cylinder,
    contract_windows,
    extract_view_kernel,
    mirror_view,
    pad_cylinder,
    view_specific_features,
)
from .fileio import (
    ConfigError,
    FormatError,
    TrainConfig,
    load_config,
    parse_config,
    read_checkpoint,
    read_dataset,
    write_checkpoint,
    write_dataset,
)
from .gradcheck import run_gradient_suite
from .head import (
    BaselineHeadParams,
    HeadParams,
    Target,
    ViewScores,
    angular_residual,
    azimuth_bin,
    baseline_scores,
    bin_angles,
    box_deltas,
    category_scores,
    decode_box,
    encode_box,
    score_map,
    sinusoidal_soft_argmax,
    total_loss,
    viewpoint_distribution,
)
from .synth import GenConfig, Sample, WireShape, content_bbox, generate_dataset, make_shape, render
from .tensor import (
    DegenerateDirectionError,
    DimensionError,
    GradReport,
    Tensor,
    backward,
    finite_diff_check,
    no_grad,
    wrap_angle,
)
from .trainer import (
    MetricReport,
    Model,
    compare_heads,
    evaluate,
    evaluate_checkpoint,
    sgd_step,
    train,
)

__version__ = "0.1.0"
