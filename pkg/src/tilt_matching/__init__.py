"""Tilt matching: regression schemes that move an interpolant velocity field
toward reward-tilted targets, with oracles, samplers and an annealing driver."""

from .anneal import (
    AdaptiveConfig, AnnealAbort, AnnealConfig, AnnealResult, AnnealState, TiltProblem, adapt_step,
    distill_velocity, measure_ess, pretrain_flow_matching, run_anneal,
)
from .interpolant import (
    DomainError, InterpolantSchedule, SampleBatch, make_linear_schedule, sample_interpolant,
    sample_interpolant_batch, sigma_squared,
)
from .losses import (
    LOSSES, ControlVariate, LossBatch, TiltOverflowError, compute_loss, constant_cv, learned_cv,
    optimal_cv_regression,
)
from .sampler import WeightedSamples, ess, importance_weights, integrate_ode, mala_refine
from .targets import (
    LennardJonesSpec, Reward, Target, circle_gmm, gaussian_target, lennard_jones_target, lj_energy,
    linear_reward, quadratic_reward, standard_normal, temperature_path,
)
from .velocity import (
    Adam, AnalyticGaussianVelocity, GridVelocity, MlpVelocity, VelocityModel, load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"
