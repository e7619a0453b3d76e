"""Command-line entry point.

Subcommands:
  run       execute an experiment config and write report files
  validate  check a config without running it
  ingest    factorize a ratings CSV and write factor/prior files

Exit codes: 0 on success, 2 for configuration errors, 3 when runtime
failures exceed the configured threshold. SDM_SEED and SDM_WORKERS
environment variables override the config; explicit flags override both.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import ingest
from .errors import ConfigError, DataError, ParameterError
from .harness import ExperimentConfig, emit, load_config, run


def _resolved_config(args) -> ExperimentConfig:
    config = load_config(args.config)
    seed = config.seed
    workers = config.workers
    if os.environ.get("SDM_SEED") is not None:
        seed = int(os.environ["SDM_SEED"])
    if os.environ.get("SDM_WORKERS") is not None:
        workers = int(os.environ["SDM_WORKERS"])
    if args.seed is not None:
        seed = args.seed
    if args.workers is not None:
        workers = args.workers
    out_dir = args.out if args.out is not None else config.output_dir
    return replace(config, seed=seed, workers=workers, output_dir=out_dir)


def _cmd_run(args) -> int:
    try:
        config = _resolved_config(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    report = run(config)
    paths = emit(report, config.output_dir)
    for path in paths:
        print(path)
    failures = report.metadata["failure_count"]
    if failures > config.failure_threshold:
        print(f"{failures} replication failures (threshold {config.failure_threshold})",
              file=sys.stderr)
        return 3
    return 0


def _cmd_validate(args) -> int:
    try:
        load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print("ok")
    return 0


def _cmd_ingest(args) -> int:
    try:
        matrix = ingest.load_ratings(args.ratings)
        if args.kuairec:
            matrix = ingest.preprocess_kuairec(matrix)
        factors = ingest.factorize(matrix, args.rank, seed=args.seed)
        gmm = ingest.fit_gmm(factors.item_factors, args.clusters, seed=args.seed)
        mixed = ingest.build_mixed_effect_prior(gmm, factors.item_factors, args.noise_sd)
        flat = ingest.build_nonstructured_prior(factors.item_factors, args.noise_sd)
    except (DataError, ParameterError, ConfigError) as exc:
        print(f"ingest error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    ingest.write_factors(os.path.join(args.out, "user_factors.csv"),
                         matrix.user_ids, factors.user_factors)
    ingest.write_factors(os.path.join(args.out, "item_factors.csv"),
                         matrix.item_ids, factors.item_factors)
    np.savez(
        os.path.join(args.out, "priors.npz"),
        latent_mean=mixed.prior.latent_mean,
        latent_cov=mixed.prior.latent_cov,
        mixing=mixed.prior.mixing,
        action_covs=mixed.prior.action_covs,
        noise_sd=mixed.prior.noise_sd,
        mixture_weights=mixed.weights,
        flat_means=flat.means,
        flat_covs=flat.covs,
    )
    for name in ("user_factors.csv", "item_factors.csv", "priors.npz"):
        print(os.path.join(args.out, name))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment config")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--workers", type=int, default=None)
    run_p.add_argument("--out", default=None)
    run_p.set_defaults(func=_cmd_run)

    val_p = sub.add_parser("validate", help="validate an experiment config")
    val_p.add_argument("--config", required=True)
    val_p.set_defaults(func=_cmd_validate)

    ing_p = sub.add_parser("ingest", help="factorize a ratings CSV into priors")
    ing_p.add_argument("--ratings", required=True)
    ing_p.add_argument("--rank", type=int, default=5)
    ing_p.add_argument("--clusters", type=int, default=5)
    ing_p.add_argument("--out", required=True)
    ing_p.add_argument("--seed", type=int, default=0)
    ing_p.add_argument("--noise-sd", type=float, default=1.0)
    ing_p.add_argument("--kuairec", action="store_true",
                       help="apply watch-ratio clipping and per-user normalization")
    ing_p.set_defaults(func=_cmd_ingest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
