"""Command-line driver.

Subcommands: gen | invert | train | sample | stats | check. Every command
is a pure function of its config and input files: reruns with identical
seeds produce byte-identical outputs, and each output directory receives
the fully resolved config that produced it.

Exit codes: 0 success, 1 property-check failure, 2 usage/config error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checks
from .bregman import run_bregman, write_trace_csv
from .config import (apply_seed_override, build_arch, build_noise_spec,
                     build_stack, build_stack_schedule, build_train_config,
                     load_config, parse_probes, write_resolved)
from .em import train, write_rounds_csv
from .errors import (CheckpointFormatError, ConfigError, GridFormatError,
                     NumericalAbortError)
from .net import load_weights, net_init, save_weights
from .stats import (PixelHistogram, model_quality, read_portable_grid,
                    sample_generator, summarize, write_histograms_csv,
                    write_portable_grid, write_quality_csv)
from .testbed import (add_noise_to_snr, gaussian_kernel, load_bank, make_bank,
                      make_ground_truth, save_bank)

__all__ = ["main", "entry", "cmd_gen", "cmd_invert", "cmd_train", "cmd_sample",
           "cmd_stats", "cmd_check"]


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def cmd_gen(args, config) -> int:
    out = _outdir(args.out)
    t = lambda key: config.get("testbed", key)
    try:
        truth = make_ground_truth((t("rows"), t("cols")), t("truth_seed"))
        kernel = gaussian_kernel(t("kernel_size"), t("kernel_sigma"))
        clean = make_bank(truth, t("experiments"), kernel, t("sampling_fraction"),
                          t("mask_seed"))
        noisy, report = add_noise_to_snr(clean, truth, build_noise_spec(config),
                                         t("noise_seed"))
    except ValueError as exc:
        raise ConfigError(f"[testbed] {exc}") from exc
    save_bank(out, noisy, manifest_extra={
        "seeds": {"truth": t("truth_seed"), "mask": t("mask_seed"),
                  "noise": t("noise_seed")},
        "sampling_fraction": t("sampling_fraction"),
        "snr_report": report,
    })
    write_portable_grid(truth.delta_m, os.path.join(out, "truth_delta.pgrd"))
    write_portable_grid(truth.m_background, os.path.join(out, "truth_background.pgrd"))
    write_resolved(config, os.path.join(out, "resolved.cfg"))
    print(f"measured snr_db: {report['measured_snr_db']}")
    return 0


def cmd_invert(args, config) -> int:
    out = _outdir(args.out)
    bank, _ = load_bank(args.bank)
    stack = build_stack(config)
    state, trace = run_bregman(bank, stack, config.get("bregman", "iterations"),
                               config.get("bregman", "draw_seed"),
                               t_max=config.get("bregman", "t_max"))
    write_portable_grid(state.x_primal, os.path.join(out, "x_primal.pgrd"))
    write_portable_grid(state.x_dual, os.path.join(out, "x_dual.pgrd"))
    write_trace_csv(trace, os.path.join(out, "trace.csv"))
    truth_path = os.path.join(args.bank, "truth_delta.pgrd")
    if os.path.exists(truth_path):
        quality = model_quality(state.x_primal, read_portable_grid(truth_path))
        write_quality_csv(quality, os.path.join(out, "quality.csv"))
    write_resolved(config, os.path.join(out, "resolved.cfg"))
    return 0


def cmd_train(args, config) -> int:
    out = _outdir(args.out)
    bank, _ = load_bank(args.bank)
    arch = build_arch(config)
    if arch.out_shape != tuple(bank.shape):
        raise ConfigError(
            f"[net] generator output {arch.out_shape} does not match the "
            f"bank grid {tuple(bank.shape)}; adjust base shape or stages")
    stack = build_stack(config)
    tc = build_train_config(config)
    if tc.n_tuples > bank.n:
        raise ConfigError(f"[em] tuples: cannot split {bank.n} experiments "
                          f"into {tc.n_tuples} tuples")
    result = train(bank, stack, arch, tc,
                   stack_schedule=build_stack_schedule(config),
                   checkpoint_dir=os.path.join(out, "checkpoint"),
                   resume_from=args.resume)
    save_weights(os.path.join(out, "weights_init.dpnw"), arch, result.initial_weights)
    save_weights(os.path.join(out, "weights.dpnw"), arch, result.weights)
    write_rounds_csv(result.rounds, os.path.join(out, "rounds.csv"))
    for tid, rows in sorted(result.tuple_traces.items()):
        write_trace_csv(rows, os.path.join(out, f"trace_tuple_{tid:03d}.csv"))
    write_resolved(config, os.path.join(out, "resolved.cfg"))
    return 0


def _checkpoint_weights(path, arch):
    if os.path.isdir(path):
        path = os.path.join(path, "weights.dpnw")
    return load_weights(path, arch)


def cmd_sample(args, config) -> int:
    out = _outdir(args.out)
    arch = build_arch(config)
    w = _checkpoint_weights(args.checkpoint, arch)
    count = args.count if args.count is not None else config.get("stats", "sample_count")
    if count < 1:
        raise ConfigError("[stats] sample_count must be at least 1")
    samples = sample_generator(arch, w, count, config.get("stats", "sample_seed"))
    for j in range(count):
        write_portable_grid(samples.realization(j),
                            os.path.join(out, f"sample_{j:04d}.pgrd"))
    write_resolved(config, os.path.join(out, "resolved.cfg"))
    return 0


def cmd_stats(args, config) -> int:
    out = _outdir(args.out)
    arch = build_arch(config)
    s = lambda key: config.get("stats", key)
    count = s("samples")
    if count < 2:
        raise ConfigError("[stats] samples: pointwise standard deviation needs "
                          "at least 2 realizations")
    w_post = _checkpoint_weights(args.checkpoint, arch)
    w_prior = net_init(arch, config.get("net", "init_seed"),
                       config.get("net", "init_scale"))
    posterior = sample_generator(arch, w_post, count, s("sample_seed"))
    prior = sample_generator(arch, w_prior, count, s("sample_seed"))
    mode = s("std_mode")

    raw_probes = s("probes")
    if raw_probes.strip() == "auto":
        first = summarize(posterior, (), mode)
        probes = parse_probes("auto", first.std)
    else:
        probes = parse_probes(raw_probes, None)
    post = summarize(posterior, probes, mode)
    pri = summarize(prior, probes, mode)

    write_portable_grid(post.mean, os.path.join(out, "mean.pgrd"))
    write_portable_grid(post.std, os.path.join(out, "std.pgrd"))
    write_portable_grid(pri.mean, os.path.join(out, "prior_mean.pgrd"))
    write_portable_grid(pri.std, os.path.join(out, "prior_std.pgrd"))

    def hists(summary):
        out_h = []
        for p in probes:
            counts, edges = np.histogram(summary.probe_values[p], bins=s("bins"))
            out_h.append(PixelHistogram(p, edges, counts))
        return out_h

    write_histograms_csv(hists(post), os.path.join(out, "hist_posterior.csv"))
    write_histograms_csv(hists(pri), os.path.join(out, "hist_prior.csv"))
    if args.truth is not None:
        quality = model_quality(post.mean, read_portable_grid(args.truth))
        write_quality_csv(quality, os.path.join(out, "quality.csv"))
    write_resolved(config, os.path.join(out, "resolved.cfg"))
    return 0


def cmd_check(args, config) -> int:
    results = checks.run_property_suite()
    width = max(len(r.name) for r in results)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  {r.detail}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="breguq",
        description="Constrained stochastic Bregman imaging with a weak deep prior")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed overriding every configured seed")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen", help="generate the synthetic testbed")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("invert", help="plain stochastic Bregman inversion")
    common(p)
    p.add_argument("--bank", required=True, help="directory produced by gen")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("train", help="run the full training loop")
    common(p)
    p.add_argument("--bank", required=True, help="directory produced by gen")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="write generator realizations")
    common(p)
    p.add_argument("--checkpoint", required=True,
                   help="weights file or train output/checkpoint directory")
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("stats", help="posterior mean/std grids and pixel histograms")
    common(p)
    p.add_argument("--checkpoint", required=True,
                   help="weights file or train output/checkpoint directory")
    p.add_argument("--truth", default=None, help="truth grid for quality metrics")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("check", help="run the property self-checks")
    common(p, out=False)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = apply_seed_override(config, args.seed)
        return args.func(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (GridFormatError, CheckpointFormatError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 2
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
