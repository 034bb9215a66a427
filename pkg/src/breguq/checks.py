"""Self-check property suite behind the `check` CLI subcommand.

Four families: adjoint dot tests over every operator kind (plus a freshly
generated mini bank), projection-versus-reference-QP agreement, generator
gradient checks against central finite differences, and the closed-form
stationary variance of the drift-only Langevin recursion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracles
from .linops import (ComposeOp, ConvKernel, ConvOp, IdentityOp, RestrictionMask,
                     RestrictOp, ScaleOp, dot_test)
from .net import NetArch, StageSpec, net_backward, net_forward, net_init
from .projections import (project_box, project_intersection, project_l1_ball,
                          project_l2_ball, project_tv_ball, Box, L1Ball,
                          ConstraintStack)
from .sgld import SgldParams, sgld_step
from .testbed import gaussian_kernel, make_bank, make_ground_truth

__all__ = ["CheckResult", "run_property_suite", "run_dot_test_checks",
           "run_projection_oracle_checks", "run_gradient_checks",
           "run_sgld_variance_check"]

DOT_TEST_TOL = 1e-10


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _standard_ops():
    rng = np.random.default_rng(90210)
    shape = (12, 12)
    kernel3 = ConvKernel(rng.standard_normal((3, 3)))
    kernel5 = ConvKernel(rng.standard_normal((5, 5)))
    mask = RestrictionMask(np.sort(rng.choice(shape[0] * shape[1], 60, replace=False)))
    ops = [
        ("identity", IdentityOp(shape)),
        ("scale", ScaleOp(shape, -2.5)),
        ("conv3", ConvOp(kernel3, shape)),
        ("conv5", ConvOp(kernel5, shape)),
        ("restrict", RestrictOp(mask, shape)),
        ("restrict_conv", ComposeOp(RestrictOp(mask, shape), ConvOp(kernel3, shape))),
    ]
    return ops


def run_dot_test_checks(extra_ops=()) -> list:
    results = []
    for name, op in list(_standard_ops()) + list(extra_ops):
        worst = dot_test(op, seed=7, trials=20)
        results.append(CheckResult(f"dot_test:{name}", worst <= DOT_TEST_TOL,
                                   f"max relative discrepancy {worst:.3e}"))
    truth = make_ground_truth((16, 16), seed=5)
    bank = make_bank(truth, 6, gaussian_kernel(3, 0.8), 0.3, seed=6)
    worst = max(dot_test(e.op, seed=8, trials=20) for e in bank.experiments)
    results.append(CheckResult("dot_test:generated_bank", worst <= DOT_TEST_TOL,
                               f"max relative discrepancy {worst:.3e}"))
    return results


def run_projection_oracle_checks() -> list:
    rng = np.random.default_rng(424242)
    results = []

    def record(name, worst, tol):
        results.append(CheckResult(f"projection_oracle:{name}", worst <= tol,
                                   f"worst deviation {worst:.3e} (tol {tol:.0e})"))

    worst = 0.0
    for _ in range(5):
        x = 3.0 * rng.standard_normal(6)
        worst = max(worst, float(np.max(np.abs(
            project_box(x, -1.0, 1.0) - oracles.qp_project_box(x, -1.0, 1.0)))))
    record("box", worst, 1e-6)

    worst = 0.0
    for _ in range(5):
        x = 2.0 * rng.standard_normal(7)
        worst = max(worst, float(np.max(np.abs(
            project_l2_ball(x, 1.5) - oracles.qp_project_l2(x, 1.5)))))
    record("l2_ball", worst, 1e-6)

    worst = 0.0
    for _ in range(5):
        x = 2.0 * rng.standard_normal(8)
        worst = max(worst, float(np.max(np.abs(
            project_l1_ball(x, 2.0) - oracles.qp_project_l1(x, 2.0)))))
    record("l1_ball", worst, 1e-6)

    worst = 0.0
    for _ in range(3):
        x = rng.standard_normal((2, 3))
        radius = 0.5 * float(np.abs(np.diff(x)).sum() + 1.0) * rng.uniform(0.2, 0.8)
        mine = project_tv_ball(x, radius)
        ref = oracles.qp_project_tv(x, radius)
        obj_mine = 0.5 * float(np.sum((mine.x - x) ** 2))
        obj_ref = 0.5 * float(np.sum((ref - x) ** 2))
        worst = max(worst, abs(obj_mine - obj_ref) / max(1.0, abs(obj_ref)))
    record("tv_ball", worst, 1e-4)

    worst = 0.0
    stack = ConstraintStack((Box(-0.6, 0.8), L1Ball(1.5)))
    for _ in range(3):
        x = 2.0 * rng.standard_normal((2, 3))
        mine = project_intersection(x, stack).x
        ref = oracles.qp_project_box_l1(x.ravel(), -0.6, 0.8, 1.5).reshape(x.shape)
        worst = max(worst, float(np.max(np.abs(mine - ref))))
    record("box_l1_intersection", worst, 1e-6)
    return results


def _fd_grad(fun, x0, h=1e-5):
    g = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        g[i] = (fun(xp) - fun(xm)) / (2.0 * h)
    return g


def run_gradient_checks() -> list:
    arch = NetArch(latent_dim=16, base_rows=2, base_cols=2, base_channels=4,
                   stages=(StageSpec(4), StageSpec(4)))
    rng = np.random.default_rng(1234)
    w = net_init(arch, seed=77, scale=1.0)
    z = rng.standard_normal(arch.latent_dim)
    upstream = rng.standard_normal(arch.out_shape)
    grad_z, grad_w = net_backward(arch, w, z, upstream)

    def denom(a, b):
        return max(abs(a), abs(b), 1e-8)

    fd_z = _fd_grad(lambda zz: float(np.sum(upstream * net_forward(arch, w, zz))), z)
    worst = float(np.max(np.abs(fd_z - grad_z) / np.array(
        [denom(a, b) for a, b in zip(fd_z, grad_z)])))

    coords = rng.choice(arch.n_params, size=30, replace=False)
    for i in coords:
        wp = w.copy()
        wp[i] += 1e-5
        wm = w.copy()
        wm[i] -= 1e-5
        fd = (float(np.sum(upstream * net_forward(arch, wp, z)))
              - float(np.sum(upstream * net_forward(arch, wm, z)))) / 2e-5
        worst = max(worst, abs(fd - grad_w[i]) / denom(fd, grad_w[i]))
    return [CheckResult("gradient_check:generator", worst <= 1e-5,
                        f"worst relative error {worst:.3e}")]


def run_sgld_variance_check() -> list:
    """Drift-only recursion at lam=0 is z <- (1-eps) z + N(0, eps I); the
    stationary per-coordinate variance is eps / (1 - (1-eps)^2)."""
    eps = 0.1
    params = SgldParams(epsilon=eps, steps=1)
    dim = 6
    rng = np.random.default_rng(5150)
    z = np.zeros(dim)
    warmup, keep = 2000, 40000
    arch = None
    for _ in range(warmup):
        z = sgld_step(z, None, arch, None, 0.0, params, rng)
    acc = 0.0
    acc2 = 0.0
    for _ in range(keep):
        z = sgld_step(z, None, arch, None, 0.0, params, rng)
        acc += z.sum()
        acc2 += float(z @ z)
    mean = acc / (keep * dim)
    var = acc2 / (keep * dim) - mean * mean
    target = eps / (1.0 - (1.0 - eps) ** 2)
    rel = abs(var - target) / target
    return [CheckResult("sgld_variance", rel <= 0.05,
                        f"pooled variance {var:.4f} vs {target:.4f} ({rel:.2%} off)")]


def run_property_suite(extra_ops=()) -> list:
    results = []
    results.extend(run_dot_test_checks(extra_ops))
    results.extend(run_projection_oracle_checks())
    results.extend(run_gradient_checks())
    results.extend(run_sgld_variance_check())
    return results
