"""Constrained stochastic linearized Bregman imaging with a weak deep prior.

Matrix-free operators, convex projections, a hand-differentiated generator
network, Langevin latent sampling, an expectation-maximization training
loop, and posterior statistics, plus a CLI wiring it all to a synthetic
desk-scale testbed.
"""

from .bregman import (BregmanState, TraceRecord, bregman_step,
                      bregman_step_augmented, dynamic_steplength,
                      eval_joint_objective, eval_lsq_objective, run_bregman)
from .em import TrainConfig, TrainTuple, e_step, init_tuples, m_step, train
from .errors import (CheckpointFormatError, ConfigError, GridFormatError,
                     NumericalAbortError)
from .linops import (ConvKernel, LinearOp, RestrictionMask, conv2d_adjoint,
                     conv2d_apply, dot_test, op_compose, restriction_adjoint,
                     restriction_apply)
from .net import (NetArch, StageSpec, fit_strong, net_backward, net_forward,
                  net_init, prior_loss_grads)
from .projections import (Box, ConstraintStack, L1Ball, L2Ball, TVBall,
                          is_feasible, project_box, project_intersection,
                          project_l1_ball, project_l2_ball, project_tv_ball)
from .sgld import SgldParams, sgld_run, sgld_step
from .stats import (mean_grid, model_quality, pixel_histogram, pointwise_std,
                    read_portable_grid, sample_generator, write_portable_grid)
from .testbed import (ExperimentBank, GroundTruth, LinearExperiment, NoiseSpec,
                      add_noise_to_snr, linearization_error, make_bank,
                      make_ground_truth, snr_db)

__version__ = "0.1.0"
