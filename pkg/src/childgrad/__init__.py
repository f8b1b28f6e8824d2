"""Gradient-masked fine-tuning toolkit.

Builds task-free (Bernoulli) and task-driven (Fisher top-k) child-network
masks, applies them inside an Adam variant, validates the update-noise and
flatness theory numerically, and replays desk-scale analogs of the
associated fine-tuning experiments.
"""

from .datasets import DataSpec, Dataset, DatasetSplits, make_dataset, subsample
from .errors import (
    ChildgradError,
    ConfigError,
    NumericError,
    ShapeError,
    UndefinedOverlapError,
)
from .fisher import FisherDiag, empirical_fisher_diag
from .harness import (
    MethodSpec,
    PretrainedSpec,
    RunConfig,
    RunReport,
    linear_probe,
    overlap_matrix,
    replicate_and_aggregate,
    run_training,
    train_run,
)
from .masking import (
    GradMask,
    apply_mask,
    bernoulli_mask,
    fisher_topk_mask,
    jaccard,
    lowest_fisher_mask,
    prune_params,
    random_fixed_mask,
    topk_layer_mask,
)
from .models import (
    ModelSpec,
    evaluate,
    init_params,
    load_checkpoint,
    log_likelihood_grad,
    save_checkpoint,
)
from .optim import (
    AdamState,
    OptimConfig,
    child_tuning_adam_step,
    clip_global_norm,
    lr_schedule,
    sgd_masked_step,
    weight_decay_to_pretrained_loss,
)
from .params import ParamVector, ShapeRegistry
from .tensor_core import Graph, Tensor, finite_diff_grad, forward_backward
from .theory import (
    BoundInputs,
    NoiseModel,
    chi2_cdf,
    chi2_quantile,
    escape_rho_bound,
    generalization_bound,
    sharpness_power_iteration,
    simulate_update_covariance,
    masked_update_moments,
)

__version__ = "0.1.0"
