import numpy as np
import pytest

from breguq.linops import (ConvKernel, ConvOp, IdentityOp, RestrictionMask,
                           RestrictOp, op_compose)
from breguq.net import NetArch, StageSpec
from breguq.testbed import ExperimentBank, LinearExperiment


def small_arch():
    return NetArch(latent_dim=8, base_rows=2, base_cols=2, base_channels=4,
                   stages=(StageSpec(4),))


def identity_bank(y_grids):
    """Bank of identity experiments over the given observation grids."""
    shape = y_grids[0].shape
    exps = [LinearExperiment(IdentityOp(shape), np.asarray(y, dtype=np.float64))
            for y in y_grids]
    return ExperimentBank(tuple(exps), shape)


def restriction_bank(x_star, index_groups):
    """Consistent bank: each experiment observes part of `x_star`."""
    shape = x_star.shape
    exps = []
    for idx in index_groups:
        mask = RestrictionMask(np.asarray(sorted(idx), dtype=np.int64))
        op = RestrictOp(mask, shape)
        exps.append(LinearExperiment(op, op.apply(x_star), mask))
    return ExperimentBank(tuple(exps), shape)


def conv_restrict_bank(x_star, kernel_taps, masks):
    shape = x_star.shape
    conv = ConvOp(ConvKernel(np.asarray(kernel_taps, dtype=np.float64)), shape)
    exps = []
    for idx in masks:
        mask = RestrictionMask(np.asarray(sorted(idx), dtype=np.int64))
        op = op_compose(RestrictOp(mask, shape), conv)
        exps.append(LinearExperiment(op, op.apply(x_star), mask))
    return ExperimentBank(tuple(exps), shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1337)
