"""Unsupervised deep-equilibrium channel estimation."""

from .baselines import BaselineConfig, amp, ista, omp
from .channels import (
    Dataset,
    NearFieldParams,
    build_polar_dictionary,
    gen_farfield_channel,
    gen_nearfield_channel,
    gen_sparse,
    generate_dataset,
    load_dataset,
    nearfield_steering,
    save_dataset,
)
from .core import (
    ChannelInstance,
    ComplexSystem,
    StandardProblem,
    ValidationError,
    embed_complex,
    mse,
    nmse,
    nmse_db,
    pmse,
    project,
)
from .deq import DeqConfig, FixedPointResult, forward_fixed_point, jfb_gradient, le_step, output_norm_certificate
from .estimator import DeqChannelEstimator, SparseBaselineEstimator
from .neural import NleParams, init_nle, lipschitz_upper_bound, nle_forward, nle_vjp, spectral_normalize
from .sensing import SensingConfig, build_measurement, measure, simulate, sufficient_statistic
from .theory import (
    TheoryReport,
    estimate_assumption_constants,
    l_half,
    mse_sandwich_check,
    oracle_gap_bound,
    rip_constant_bruteforce,
    sgf_bound_numeric,
    sgf_brute_force,
    sgf_closed_form,
    sparse_residual_ratio,
    sparsity_bounds,
)
from .training import (
    GsureConfig,
    LossMode,
    TrainConfig,
    adam_step,
    gsure_loss_and_grad,
    gsure_value,
    hutchinson_divergence,
    supervised_loss_and_grad,
    train,
)

__version__ = "0.1.0"
