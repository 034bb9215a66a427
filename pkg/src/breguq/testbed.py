"""Synthetic desk-scale problem generator.

Builds a bank of matrix-free experiments A_i = Restrict_i . Conv over a
piecewise-constant layered ground truth, then pollutes the clean data with
coherent error from a quadratic surrogate forward plus white noise scaled
to hit a target signal-to-noise ratio exactly.

The surrogate forward for experiment i is
    F_i(v) = A_i v + gamma * R_i((C v) * (C v))
whose linearization error around any background is exactly
gamma * R_i((C dm)^2); this closed form is what `linearization_error`
returns, while `linearization_error_direct` evaluates the three-term
definition so the identity can be checked numerically.

Generation is deterministic given (shape, counts, seeds) and outputs are
treated as immutable afterwards.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .linops import (ConvKernel, ConvOp, RestrictionMask, RestrictOp, dot_test,
                     op_compose)
from .stats import read_portable_grid, write_portable_grid

__all__ = [
    "GroundTruth",
    "NoiseSpec",
    "LinearExperiment",
    "ExperimentBank",
    "gaussian_kernel",
    "make_ground_truth",
    "make_bank",
    "linearization_error",
    "linearization_error_direct",
    "add_noise_to_snr",
    "snr_db",
    "save_bank",
    "load_bank",
]


@dataclass(frozen=True)
class GroundTruth:
    """Unknown perturbation (piecewise-constant layers) and the smooth
    background it sits on."""

    delta_m: np.ndarray
    m_background: np.ndarray

    def __post_init__(self):
        if self.delta_m.shape != self.m_background.shape:
            raise ValueError("perturbation and background shapes differ")


@dataclass(frozen=True)
class NoiseSpec:
    """Target SNR in dB and surrogate nonlinearity strength.

    gamma=None calibrates the quadratic term so the coherent error carries
    `coherent_fraction` of the total perturbation energy; an explicit
    gamma is used as-is. target_snr_db=inf means noise-free.
    """

    target_snr_db: float
    gamma: float | None = None
    coherent_fraction: float = 0.3

    def __post_init__(self):
        if math.isnan(self.target_snr_db):
            raise ValueError("target SNR must not be NaN")
        if self.gamma is not None and not (self.gamma >= 0 and np.isfinite(self.gamma)):
            raise ValueError(f"gamma must be finite and non-negative, got {self.gamma}")
        if not 0.0 <= self.coherent_fraction < 1.0:
            raise ValueError("coherent fraction must lie in [0, 1)")


@dataclass(frozen=True)
class LinearExperiment:
    """One source experiment: matrix-free operator plus observed data."""

    op: object
    y: np.ndarray
    mask: RestrictionMask | None = None


@dataclass(frozen=True)
class ExperimentBank:
    experiments: tuple
    shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "experiments", tuple(self.experiments))
        object.__setattr__(self, "shape", tuple(self.shape))
        if not self.experiments:
            raise ValueError("experiment bank must be non-empty")

    @property
    def n(self) -> int:
        return len(self.experiments)


def gaussian_kernel(size: int, sigma: float) -> ConvKernel:
    """Normalized band-limited (low-pass) stencil."""
    if sigma <= 0:
        raise ValueError(f"kernel sigma must be positive, got {sigma}")
    h = size // 2
    d = np.arange(-h, h + 1)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return ConvKernel(g / g.sum())


def make_ground_truth(shape, seed: int) -> GroundTruth:
    """3-6 horizontal layers with wiggly seeded interfaces and per-layer
    amplitudes in [-1, 1]; background is a smooth ramp."""
    rows, cols = int(shape[0]), int(shape[1])
    if rows < 16 or cols < 16:
        raise ValueError(f"ground-truth grid must be at least 16x16, got {rows}x{cols}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    n_layers = int(rng.integers(3, 7))
    n_if = n_layers - 1

    base = (np.arange(1, n_layers) * rows) / n_layers
    jitter = rows / (4.0 * n_layers)
    base = base + rng.uniform(-jitter, jitter, n_if)
    amp = rng.uniform(0.5, 0.5 + rows / (6.0 * n_layers), n_if)
    freq = rng.integers(1, 4, n_if)
    phase = rng.uniform(0.0, 2.0 * np.pi, n_if)

    t = np.arange(cols)
    depth = np.empty((n_if, cols), dtype=np.int64)
    for j in range(n_if):
        wave = base[j] + amp[j] * np.sin(2.0 * np.pi * (freq[j] * t / cols + phase[j]))
        depth[j] = np.round(wave).astype(np.int64)
    for j in range(n_if):
        depth[j] = np.clip(depth[j], 1 + j, rows - (n_if - j))
        if j > 0:
            depth[j] = np.maximum(depth[j], depth[j - 1] + 1)

    values = rng.uniform(-1.0, 1.0, n_layers)
    layer_idx = np.zeros((rows, cols), dtype=np.int64)
    r_idx = np.arange(rows)[:, None]
    for j in range(n_if):
        layer_idx += (r_idx >= depth[j][None, :])
    delta_m = values[layer_idx]

    ramp = (0.25 + 0.5 * np.arange(rows)[:, None] / max(rows - 1, 1)
            + 0.25 * np.arange(cols)[None, :] / max(cols - 1, 1))
    return GroundTruth(delta_m, np.ascontiguousarray(ramp))


def make_bank(truth: GroundTruth, n_experiments: int, kernel: ConvKernel,
              sampling_fraction: float, seed: int,
              audit_tol: float = 1e-10) -> ExperimentBank:
    """Noiseless bank: per-experiment seeded restriction masks over one
    shared convolution; every operator is adjoint-audited at generation."""
    if n_experiments < 1:
        raise ValueError(f"need at least one experiment, got {n_experiments}")
    if not 0.0 < sampling_fraction <= 1.0:
        raise ValueError(f"sampling fraction must lie in (0, 1], got {sampling_fraction}")
    shape = truth.delta_m.shape
    size = shape[0] * shape[1]
    m_keep = max(1, int(round(sampling_fraction * size)))
    conv = ConvOp(kernel, shape)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    experiments = []
    for i in range(n_experiments):
        idx = np.sort(rng.choice(size, size=m_keep, replace=False))
        mask = RestrictionMask(idx)
        op = op_compose(RestrictOp(mask, shape), conv)
        worst = dot_test(op, seed=int(seed) + i, trials=3)
        if worst > audit_tol:
            raise RuntimeError(f"operator {i} failed the adjoint audit: {worst:.3e}")
        experiments.append(LinearExperiment(op, op.apply(truth.delta_m), mask))
    return ExperimentBank(tuple(experiments), shape)


def _coherent_basis(truth: GroundTruth, C, bank: ExperimentBank):
    """R_i((C dm)^2) for each experiment: the gamma=1 coherent error."""
    cdm = C.apply(truth.delta_m)
    full = cdm * cdm
    out = []
    for exp in bank.experiments:
        if exp.mask is None:
            raise ValueError("experiment lacks a restriction mask")
        out.append(full.ravel()[exp.mask.indices].copy())
    return out


def linearization_error(truth: GroundTruth, C, gamma: float, bank: ExperimentBank):
    """Closed-form coherent error gamma * R_i((C dm)^2), per experiment."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    return [gamma * b for b in _coherent_basis(truth, C, bank)]


def linearization_error_direct(truth: GroundTruth, C, gamma: float,
                               bank: ExperimentBank):
    """Three-term linearization error of the quadratic surrogate forward,
    evaluated literally around the background model."""
    m = truth.m_background
    dm = truth.delta_m

    def restrict(exp, grid):
        return grid.ravel()[exp.mask.indices].copy()

    out = []
    for exp in bank.experiments:
        def forward(v):
            cv = C.apply(v)
            return exp.op.apply(v) + gamma * restrict(exp, cv * cv)

        jac = exp.op.apply(dm) + 2.0 * gamma * restrict(exp, C.apply(m) * C.apply(dm))
        out.append(forward(m + dm) - forward(m) - jac)
    return out


def snr_db(signal_energy: float, perturbation_energy: float) -> float:
    """10*log10(signal / perturbation)."""
    if not (signal_energy > 0 and perturbation_energy > 0):
        raise ValueError("energies must be positive")
    return 10.0 * math.log10(signal_energy / perturbation_energy)


def add_noise_to_snr(bank: ExperimentBank, truth: GroundTruth, spec: NoiseSpec,
                     seed: int, C=None):
    """Add coherent plus white error so the survey-wide SNR hits the target.

    The white-noise amplitude solves the exact quadratic for the total
    perturbation energy, so the measured SNR matches the target to machine
    precision. Returns (noisy bank, report dict).
    """
    signal = [float(np.dot(e.y.ravel(), e.y.ravel())) for e in bank.experiments]
    s_total = float(sum(signal))
    if s_total <= 0.0:
        raise ValueError("zero-signal bank: SNR is undefined")

    if math.isinf(spec.target_snr_db) and spec.target_snr_db > 0:
        if spec.gamma not in (None, 0.0):
            raise ValueError("noise-free target requires gamma of 0")
        report = {"signal_energy": s_total, "perturbation_energy": 0.0,
                  "coherent_energy": 0.0, "noise_energy": 0.0, "gamma": 0.0,
                  "measured_snr_db": math.inf, "per_experiment_snr_db": []}
        return bank, report

    p_total = s_total * 10.0 ** (-spec.target_snr_db / 10.0)
    want_coherent = ((spec.gamma is None and spec.coherent_fraction > 0)
                     or (spec.gamma is not None and spec.gamma > 0))
    if want_coherent:
        if C is None:
            C = bank.experiments[0].op.inner
        basis = _coherent_basis(truth, C, bank)
        b_total = float(sum(np.dot(b.ravel(), b.ravel()) for b in basis))
        if spec.gamma is None:
            target_coherent = spec.coherent_fraction * p_total
            if target_coherent > 0 and b_total <= 0:
                raise ValueError("coherent error basis is zero; cannot calibrate gamma")
            gamma = math.sqrt(target_coherent / b_total) if b_total > 0 else 0.0
        else:
            gamma = float(spec.gamma)
        coherent = [gamma * b for b in basis]
    else:
        gamma = 0.0
        coherent = [np.zeros_like(e.y) for e in bank.experiments]
    e_total = float(sum(np.dot(e.ravel(), e.ravel()) for e in coherent))
    if e_total > p_total:
        raise ValueError(
            f"coherent error energy {e_total:.6g} exceeds the perturbation "
            f"budget {p_total:.6g} implied by the target SNR")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    white = [rng.standard_normal(e.y.shape) for e in bank.experiments]
    cross = float(sum(np.dot(e.ravel(), h.ravel()) for e, h in zip(coherent, white)))
    h_total = float(sum(np.dot(h.ravel(), h.ravel()) for h in white))
    alpha = (-cross + math.sqrt(cross * cross + h_total * (p_total - e_total))) / h_total

    experiments = []
    per_snr = []
    noise_energy = 0.0
    for exp, e_i, h_i, s_i in zip(bank.experiments, coherent, white, signal):
        pert = e_i + alpha * h_i
        noise_energy += float(alpha * alpha * np.dot(h_i.ravel(), h_i.ravel()))
        p_i = float(np.dot(pert.ravel(), pert.ravel()))
        per_snr.append(snr_db(s_i, p_i) if s_i > 0 and p_i > 0 else math.inf)
        experiments.append(LinearExperiment(exp.op, exp.y + pert, exp.mask))
    noisy = ExperimentBank(tuple(experiments), bank.shape)
    p_meas = float(sum(np.dot((n.y - o.y).ravel(), (n.y - o.y).ravel())
                       for n, o in zip(experiments, bank.experiments)))
    report = {
        "signal_energy": s_total,
        "perturbation_energy": p_meas,
        "coherent_energy": e_total,
        "noise_energy": noise_energy,
        "gamma": gamma,
        "measured_snr_db": snr_db(s_total, p_meas),
        "per_experiment_snr_db": per_snr,
    }
    return noisy, report


def save_bank(dirpath, bank: ExperimentBank, manifest_extra: dict | None = None) -> None:
    """Write the bank as a text manifest (kernel taps, masks, metadata)
    plus one portable grid per observed-data vector."""
    os.makedirs(dirpath, exist_ok=True)
    kernel = bank.experiments[0].op.inner.kernel
    manifest = {
        "format": "breguq-bank",
        "version": 1,
        "rows": bank.shape[0],
        "cols": bank.shape[1],
        "n_experiments": bank.n,
        "kernel_size": kernel.size,
        "kernel_taps": [float(v) for v in kernel.taps.ravel()],
        "masks": [[int(i) for i in e.mask.indices] for e in bank.experiments],
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    with open(os.path.join(dirpath, "manifest.json"), "w", newline="") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    for i, exp in enumerate(bank.experiments):
        write_portable_grid(exp.y.reshape(1, -1),
                            os.path.join(dirpath, f"y_{i:04d}.pgrd"))


def load_bank(dirpath):
    """Rebuild a bank from its manifest and data files."""
    with open(os.path.join(dirpath, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != "breguq-bank":
        raise ValueError(f"not a bank manifest: {dirpath}")
    shape = (manifest["rows"], manifest["cols"])
    kernel = ConvKernel(np.array(manifest["kernel_taps"]).reshape(
        manifest["kernel_size"], manifest["kernel_size"]))
    conv = ConvOp(kernel, shape)
    experiments = []
    for i, idx in enumerate(manifest["masks"]):
        mask = RestrictionMask(np.asarray(idx, dtype=np.int64))
        op = op_compose(RestrictOp(mask, shape), conv)
        y = read_portable_grid(os.path.join(dirpath, f"y_{i:04d}.pgrd")).ravel()
        experiments.append(LinearExperiment(op, y, mask))
    return ExperimentBank(tuple(experiments), shape), manifest
