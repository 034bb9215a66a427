"""Semi-supervised training loop: per-tuple inversion and latent inference
alternated with averaged generator-weight updates.

Each training tuple owns a disjoint round-robin subset of the experiment
bank, a primal/dual grid pair, and a latent vector. A round runs, per
tuple, a block of augmented Bregman steps (drawing experiments inside the
tuple's subset) followed by a warm-started Langevin chain over the latent,
all with the weights read-only; the round ends with a synchronization
barrier where per-tuple gradients are reduced in ascending id order and
the weights take one (configurable) descent step. The generator output
acts as the shared center the per-tuple solutions are elastically pulled
toward.

Randomness is counter-keyed: experiment draws come from per-tuple streams
(seed, tuple id) consumed sequentially across rounds, and Langevin noise
from per-step streams (seed, tuple id, round, step). E-step results are
therefore independent of tuple scheduling, and a run can resume from a
checkpoint bit-exactly by fast-forwarding the draw streams.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .bregman import T_MAX_DEFAULT, BregmanState, bregman_step_augmented
from .errors import NumericalAbortError
from .net import (NetArch, load_weights, net_eval_and_backward, net_forward,
                  net_init, save_weights)
from .projections import ConstraintStack
from .sgld import SgldParams, sgld_run
from .stats import read_portable_grid, write_portable_grid

__all__ = [
    "TrainTuple",
    "TrainConfig",
    "RoundRecord",
    "TrainResult",
    "init_tuples",
    "lam_schedule",
    "e_step",
    "m_step",
    "train",
    "write_rounds_csv",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class TrainTuple:
    """One latent triple: assigned experiments, primal/dual grids, latent."""

    id: int
    experiment_ids: np.ndarray
    x_primal: np.ndarray
    x_dual: np.ndarray
    z: np.ndarray
    step_count: int = 0


@dataclass(frozen=True)
class TrainConfig:
    n_tuples: int = 8
    rounds: int = 50
    bregman_steps_per_round: int = 8
    sgld: SgldParams = SgldParams()
    lam_init: float = 0.0
    lam_final: float = 1.0
    lam_ramp_rounds: int | None = None  # None -> rounds // 2
    eta: float = 1e-3
    m_steps_per_round: int = 1
    loss_normalization: str = "mean"
    steplength_mode: str = "stacked"
    t_max: float = T_MAX_DEFAULT
    init_seed: int = 23
    init_scale: float = 1.0
    z_seed: int = 37
    draw_seed: int = 41
    noise_seed: int = 31

    def __post_init__(self):
        if self.n_tuples < 1:
            raise ValueError("need at least one tuple")
        if self.rounds < 0 or self.bregman_steps_per_round < 0:
            raise ValueError("round counts must be non-negative")
        if self.eta < 0 or self.lam_init < 0 or self.lam_final < 0:
            raise ValueError("steplengths and trade-off values must be non-negative")
        if self.m_steps_per_round < 1:
            raise ValueError("m_steps_per_round must be at least 1")
        if self.loss_normalization not in ("mean", "sum"):
            raise ValueError(f"unknown loss normalization {self.loss_normalization!r}")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    lam: float
    mean_data_misfit: float
    mean_prior_misfit: float


@dataclass(frozen=True)
class TrainResult:
    weights: np.ndarray
    initial_weights: np.ndarray
    tuples: list
    rounds: list
    tuple_traces: dict


def lam_schedule(config: TrainConfig, round_idx: int) -> float:
    """Linear ramp from lam_init to lam_final over the ramp window, then
    constant at lam_final."""
    ramp = config.lam_ramp_rounds
    if ramp is None:
        ramp = config.rounds // 2
    if ramp <= 0 or round_idx >= ramp:
        return config.lam_final
    return config.lam_init + (config.lam_final - config.lam_init) * (round_idx / ramp)


def init_tuples(bank, n: int, seed: int, latent_dim: int) -> list:
    """Round-robin partition of the bank (experiment i -> tuple i mod n),
    zero primal/dual grids, and latents drawn from one seeded stream."""
    n_exp = bank.n
    if n > n_exp:
        raise ValueError(f"cannot split {n_exp} experiments into {n} tuples")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    shape = bank.shape
    tuples = []
    for t in range(n):
        ids = np.arange(t, n_exp, n, dtype=np.int64)
        z = rng.standard_normal(latent_dim)
        tuples.append(TrainTuple(t, ids, np.zeros(shape), np.zeros(shape), z))
    return tuples


def _draw_stream(draw_seed: int, tuple_id: int, skip: int,
                 bound: int) -> np.random.Generator:
    # Replay (not jump) skipped draws: bounded-integer rejection sampling
    # consumes a bound-dependent amount of the bitstream.
    rng = np.random.default_rng(np.random.SeedSequence([int(draw_seed), int(tuple_id)]))
    for _ in range(skip):
        rng.integers(0, bound)
    return rng


def e_step(tuples, bank, arch: NetArch, w, lam: float, stack: ConstraintStack,
           config: TrainConfig, round_idx: int, on_primal=None):
    """Per tuple: a block of augmented Bregman steps drawing experiments
    inside the tuple's subset, then a warm-started Langevin chain on the
    latent. Weights are read-only. Returns (new tuples, per-tuple trace).
    """
    exps = list(bank.experiments)
    steps = config.bregman_steps_per_round
    new_tuples = []
    traces = {}
    for t in tuples:
        rng = _draw_stream(config.draw_seed, t.id, round_idx * steps,
                           t.experiment_ids.size)
        state = BregmanState(t.x_dual, t.x_primal, t.step_count)
        rows = []
        for _ in range(steps):
            j = int(rng.integers(0, t.experiment_ids.size))
            k = int(t.experiment_ids[j])
            state, rec = bregman_step_augmented(
                state, exps[k], t.z, arch, w, lam, stack,
                t_max=config.t_max, steplength_mode=config.steplength_mode, k=k)
            rows.append(rec)
            if on_primal is not None:
                on_primal(state.x_primal)
        z_new = t.z
        if config.sgld.steps > 0:
            z_new, _ = sgld_run(t.z, state.x_primal, arch, w, lam, config.sgld,
                                (config.noise_seed, t.id, round_idx))
        new_tuples.append(replace(t, x_primal=state.x_primal, x_dual=state.x_dual,
                                  z=z_new, step_count=state.iter))
        traces[t.id] = rows
    return new_tuples, traces


def m_step(tuples, arch: NetArch, w, eta: float,
           loss_normalization: str = "mean") -> np.ndarray:
    """One descent step on the summed (or tuple-averaged) squared mismatch
    between primal grids and generator outputs; gradients accumulate in
    ascending tuple-id order."""
    grad = np.zeros(arch.n_params)
    losses = {}
    for t in sorted(tuples, key=lambda u: u.id):
        g, _, gw = net_eval_and_backward(arch, w, t.z,
                                         lambda out: 2.0 * (out - t.x_primal))
        diff = g - t.x_primal
        losses[t.id] = float(np.dot(diff.ravel(), diff.ravel()))
        grad += gw
    if loss_normalization == "mean":
        grad /= len(tuples)
    if not np.all(np.isfinite(grad)):
        raise NumericalAbortError("non-finite weight gradient",
                                  diagnostics={"per_tuple_loss": losses})
    return w - eta * grad


def _tuple_data_misfit(t: TrainTuple, bank) -> float:
    total = 0.0
    for k in t.experiment_ids:
        exp = bank.experiments[int(k)]
        r = exp.op.apply(t.x_primal) - exp.y
        total += float(np.dot(r.ravel(), r.ravel()))
    return total


def train(bank, stack: ConstraintStack, arch: NetArch, config: TrainConfig,
          stack_schedule=None, on_primal=None, checkpoint_dir=None,
          resume_from=None) -> TrainResult:
    """Run the full loop: rounds of (e_step; m_step) with the trade-off
    parameter following its ramp.

    `stack_schedule(round) -> ConstraintStack` optionally relaxes the
    handcrafted sets per round. `checkpoint_dir` receives a resumable
    checkpoint after every round; `resume_from` restarts from one and
    reproduces the uninterrupted run exactly (streams are counter-keyed).
    """
    if arch.out_shape != tuple(bank.shape):
        raise ValueError(f"generator output {arch.out_shape} does not match "
                         f"bank grid {tuple(bank.shape)}")
    w0 = net_init(arch, config.init_seed, config.init_scale)
    if resume_from is not None:
        w, tuples, start_round = load_checkpoint(resume_from, arch)
    else:
        w = w0.copy()
        tuples = init_tuples(bank, config.n_tuples, config.z_seed, arch.latent_dim)
        start_round = 0
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, arch, w, tuples, -1)

    round_records = []
    tuple_traces = {t.id: [] for t in tuples}
    for r in range(start_round, config.rounds):
        lam = lam_schedule(config, r)
        stack_r = stack if stack_schedule is None else stack_schedule(r)
        tuples, traces = e_step(tuples, bank, arch, w, lam, stack_r, config, r,
                                on_primal=on_primal)
        for tid, rows in traces.items():
            tuple_traces[tid].extend(rows)
        for _ in range(config.m_steps_per_round):
            w = m_step(tuples, arch, w, config.eta, config.loss_normalization)
        data = float(np.mean([_tuple_data_misfit(t, bank) for t in tuples]))
        prior = float(np.mean([np.linalg.norm(
            (t.x_primal - net_forward(arch, w, t.z)).ravel()) for t in tuples]))
        round_records.append(RoundRecord(r, lam, data, prior))
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, arch, w, tuples, r)
    return TrainResult(w, w0, tuples, round_records, tuple_traces)


def write_rounds_csv(records, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["round", "lam", "mean_data_misfit", "mean_prior_misfit"])
        for r in records:
            writer.writerow([r.round, repr(r.lam), repr(r.mean_data_misfit),
                             repr(r.mean_prior_misfit)])


def save_checkpoint(dirpath, arch: NetArch, w, tuples, round_completed: int) -> None:
    os.makedirs(dirpath, exist_ok=True)
    save_weights(os.path.join(dirpath, "weights.dpnw"), arch, w)
    state = {
        "round_completed": int(round_completed),
        "tuples": [{"id": int(t.id),
                    "experiment_ids": [int(k) for k in t.experiment_ids],
                    "step_count": int(t.step_count)} for t in tuples],
    }
    with open(os.path.join(dirpath, "state.json"), "w", newline="") as f:
        json.dump(state, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(dirpath, "latents.csv"), "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["tuple_id", "dim", "value"])
        for t in tuples:
            for d, v in enumerate(t.z):
                writer.writerow([t.id, d, repr(float(v))])
    for t in tuples:
        write_portable_grid(t.x_primal, os.path.join(dirpath, f"tuple_{t.id:03d}_x.pgrd"))
        write_portable_grid(t.x_dual, os.path.join(dirpath, f"tuple_{t.id:03d}_xdual.pgrd"))


def load_checkpoint(dirpath, arch: NetArch):
    """Returns (weights, tuples, next round index)."""
    with open(os.path.join(dirpath, "state.json")) as f:
        state = json.load(f)
    w = load_weights(os.path.join(dirpath, "weights.dpnw"), arch)
    latents = {}
    with open(os.path.join(dirpath, "latents.csv"), newline="") as f:
        for row in csv.DictReader(f):
            latents.setdefault(int(row["tuple_id"]), {})[int(row["dim"])] = float(row["value"])
    tuples = []
    for rec in state["tuples"]:
        tid = rec["id"]
        z = np.array([latents[tid][d] for d in range(len(latents[tid]))])
        tuples.append(TrainTuple(
            tid, np.asarray(rec["experiment_ids"], dtype=np.int64),
            read_portable_grid(os.path.join(dirpath, f"tuple_{tid:03d}_x.pgrd")),
            read_portable_grid(os.path.join(dirpath, f"tuple_{tid:03d}_xdual.pgrd")),
            z, rec["step_count"]))
    return w, tuples, state["round_completed"] + 1
