"""Command-line entry point: ``mvclip <subcommand> ...``.

Each subcommand resolves its configuration as defaults, then an optional JSON
file given with ``--config``, then explicit flags. Unknown keys in the file
are rejected. The resolved configuration and its hash are printed before any
work starts.

Exit codes: 0 success, 1 partial result, 2 configuration or input error,
3 numeric failure. ``HCS_LOG`` sets the log level (debug, info, warning).
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from mvclip.errors import (
    ConfigError,
    NonFiniteError,
    RatioUndefinedError,
    TrainingDivergedError,
)

log = logging.getLogger("mvclip")

EXIT_OK, EXIT_PARTIAL, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOLERANCE = 1e-4
BASELINE_SIGMAS = 4.0


# -- configuration -------------------------------------------------------------


def _merge(base: dict, update: dict, where: str = "") -> None:
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a table")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def resolve_config(defaults: dict, config_path=None, overrides: dict | None = None) -> dict:
    """Merge defaults < JSON file < flag overrides (dotted keys, ``None`` skipped)."""
    cfg = copy.deepcopy(defaults)
    if config_path is not None:
        path = Path(config_path)
        try:
            loaded = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, loaded)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _announce(name: str, cfg: dict) -> None:
    print(f"[{name}] resolved config: {json.dumps(cfg, sort_keys=True)}")
    print(f"[{name}] config hash: {config_hash(cfg)}")


def _build(cls, values: dict, what: str):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad {what} config: {exc}") from None


# -- subcommands ---------------------------------------------------------------


def cmd_preprocess(args) -> int:
    from mvclip.preprocess import PreprocessConfig, report_stats, run_pipeline

    cfg = resolve_config(
        PreprocessConfig().to_dict(),
        args.config,
        {"seed": args.seed, "excluded_sources": args.exclude_source or None},
    )
    _announce("preprocess", cfg)
    if not Path(args.input_root).is_dir():
        raise FileNotFoundError(f"input directory not found: {args.input_root}")
    manifest = run_pipeline(args.input_root, args.output_root, workers=args.workers,
                            config=PreprocessConfig.from_dict(cfg))
    print(report_stats(manifest)[0], end="")
    print(f"{manifest.converted} converted, {manifest.reused} reused, {len(manifest.skipped)} skipped")
    if manifest.skipped:
        for s in manifest.skipped:
            log.warning("skipped %s/%s/%s/%s view %s: %s", s["source"], s["batch"], s["plate"], s["well"],
                        s["view"], s["reason"])
        return EXIT_PARTIAL
    return EXIT_OK


LOSS_CHECK_DEFAULTS = {
    "loss": "emm",
    "n": 4,
    "m": None,
    "d": 8,
    "tau": 0.07,
    "gamma": 0.5,
    "eps": 1e-6,
    "pair_set_variant": "ordered_distinct",
    "denominator_includes_positives": False,
    "seed": 0,
}


def cmd_loss_check(args) -> int:
    from mvclip.losses import LossConfig, grad_check, imm_loss, random_batch

    cfg = resolve_config(
        LOSS_CHECK_DEFAULTS,
        args.config,
        {k: getattr(args, k) for k in ("loss", "n", "m", "d", "tau", "gamma", "eps", "seed")}
        | {"pair_set_variant": args.pairs, "denominator_includes_positives": args.include_positives or None},
    )
    if cfg["m"] is None:
        cfg["m"] = 1 if cfg["loss"] == "clip" else 3
    _announce("loss-check", cfg)
    loss_cfg = LossConfig(
        tau=cfg["tau"], gamma=cfg["gamma"], pair_set_variant=cfg["pair_set_variant"],
        denominator_includes_positives=cfg["denominator_includes_positives"],
    )
    batch = random_batch(cfg["n"], cfg["m"], cfg["d"], seed=cfg["seed"])
    if cfg["loss"] == "imm":
        imm_loss(batch, loss_cfg)  # surfaces precondition errors before differencing
    err = grad_check(cfg["loss"], batch, loss_cfg, eps=cfg["eps"])
    ok = err < GRAD_TOLERANCE
    print(f"max relative gradient error: {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {GRAD_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def train_defaults() -> dict:
    from mvclip.toy_train import SyntheticConfig, TrainConfig

    train = dataclasses.asdict(TrainConfig())
    train["encoder_widths"] = list(train["encoder_widths"])
    train["loss"] = train.pop("loss_cfg")
    return {"synthetic": dataclasses.asdict(SyntheticConfig()), "train": train}


def cmd_train_toy(args) -> int:
    from mvclip.losses import LossConfig
    from mvclip.retrieval import RetrievalConfig, evaluate
    from mvclip.toy_train import SyntheticConfig, TrainConfig, run_toy

    cfg = resolve_config(
        train_defaults(),
        args.config,
        {"train.loss_kind": args.loss, "train.epochs": args.epochs, "train.seed": args.seed,
         "synthetic.seed": args.seed},
    )
    _announce("train-toy", cfg)
    train = dict(cfg["train"])
    train["loss_cfg"] = _build(LossConfig, train.pop("loss"), "loss")
    synth = _build(SyntheticConfig, cfg["synthetic"], "synthetic")
    run = run_toy(synth, _build(TrainConfig, train, "train"), out_dir=args.out)
    curve = run.result.loss_curve
    print(f"loss: first epoch {curve[0]:.5f}, last epoch {curve[-1]:.5f} ({run.result.wall_time:.1f} s)")
    if len(run.heldout_idx) >= 100:
        mrr = evaluate(run.heldout[0], RetrievalConfig()).mrr
        print(f"held-out img2mol MRR (1:100): {mrr:.4f}")
    print(f"artifacts written to {args.out}")
    return EXIT_OK


RETRIEVAL_DEFAULTS = {"pool_size": 100, "ks": [1, 3, 5, 10], "direction": "both", "trials": 1, "seed": 0}


def _baseline_failures(rep, n_queries: int) -> list[str]:
    from mvclip.retrieval import random_baseline

    hit, mrr = random_baseline(rep.pool_size, sorted(rep.hit_rate))
    p = rep.pool_size
    recip_var = sum(1 / r**2 for r in range(1, p + 1)) / p - mrr**2
    bad = []
    for k, expected in hit.items():
        tol = BASELINE_SIGMAS * math.sqrt(expected * (1 - expected) / n_queries)
        if abs(rep.hit_rate[k] - expected) > tol:
            bad.append(f"{rep.direction} HR@{k}={rep.hit_rate[k]:.4f} expected {expected:.4f} +- {tol:.4f}")
    tol = BASELINE_SIGMAS * math.sqrt(recip_var / n_queries)
    if abs(rep.mrr - mrr) > tol:
        bad.append(f"{rep.direction} MRR={rep.mrr:.4f} expected {mrr:.4f} +- {tol:.4f}")
    return bad


def cmd_eval_retrieval(args) -> int:
    from mvclip.retrieval import DIRECTIONS, RetrievalConfig, evaluate, report_csv, report_table
    from mvclip.tables import read_retrieval_csv

    ks = [int(k) for k in args.ks.split(",")] if args.ks else None
    cfg = resolve_config(
        RETRIEVAL_DEFAULTS, args.config,
        {"pool_size": args.pool_size, "ks": ks, "direction": args.direction, "trials": args.trials, "seed": args.seed},
    )
    _announce("eval-retrieval", cfg)
    directions = DIRECTIONS if cfg["direction"] == "both" else (cfg["direction"],)
    table = read_retrieval_csv(args.embeddings)
    reports = [
        evaluate(table, _build(RetrievalConfig, {**cfg, "direction": d}, "retrieval")) for d in directions
    ]
    print(report_table(reports, args.label), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "retrieval.csv").write_text(report_csv(reports, args.label))
        (out / "retrieval.txt").write_text(report_table(reports, args.label))
    if args.assert_random_baseline:
        bad = [msg for rep in reports for msg in _baseline_failures(rep, len(rep.per_query_ranks))]
        for msg in bad:
            print(f"outside random-baseline band: {msg}")
        if bad:
            return EXIT_NUMERIC
        print(f"random baseline reproduced within {BASELINE_SIGMAS:g} standard errors")
    return EXIT_OK


BATCH_DEFAULTS = {
    "probe": "logreg",
    "repetitions": 5,
    "test_fraction": 0.2,
    "seed": 0,
    "logreg": {"l2": 1e-4, "epochs": 200, "lr": 0.1, "schedule": "cosine"},
    "knn": {"k": 15},
}


def cmd_eval_batch_effect(args) -> int:
    from mvclip.batch_effect import SplitSpec, detail_csv, evaluate_batch_effect, report_csv, report_table
    from mvclip.tables import read_labeled_csv

    cfg = resolve_config(
        BATCH_DEFAULTS, args.config,
        {"probe": args.probe, "repetitions": args.repetitions, "seed": args.seed},
    )
    _announce("eval-batch-effect", cfg)
    if cfg["probe"] not in ("logreg", "knn"):
        raise ConfigError(f"probe must be logreg or knn, got {cfg['probe']!r}")
    data = read_labeled_csv(args.embeddings)
    spec = SplitSpec(test_fraction=cfg["test_fraction"], repetitions=cfg["repetitions"], seed=cfg["seed"])
    rep = evaluate_batch_effect(data, spec, probe=cfg["probe"], workers=args.workers, **cfg[cfg["probe"]])
    print(report_table(rep, args.label), end="")
    for mode, accs in rep.per_repetition.items():
        print(f"  {mode:<7} mean {np.mean(accs):.4f}  sd {np.std(accs):.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "batch_effect.csv").write_text(report_csv(rep, args.label))
        (out / "batch_effect_detail.csv").write_text(detail_csv(rep))
    return EXIT_OK


FIXTURE_KINDS = ("images", "images-mixed", "labeled", "labeled-offset", "retrieval-random", "retrieval-oracle")


def cmd_make_fixture(args) -> int:
    from mvclip.batch_effect import synthetic_labeled
    from mvclip.preprocess.fixture import make_fixture, mixed_view_layout, small_layout
    from mvclip.tables import EmbeddingTable, write_labeled_csv, write_retrieval_csv

    out = Path(args.out)
    if args.kind in ("images", "images-mixed"):
        layout = small_layout() if args.kind == "images" else mixed_view_layout()
        make_fixture(out, layout, shape=(args.size, args.size), seed=args.seed)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        if args.kind.startswith("labeled"):
            offset = 6.0 if args.kind == "labeled-offset" else 0.0
            write_labeled_csv(out, synthetic_labeled(source_offset=offset, seed=args.seed))
        else:
            rng = np.random.default_rng(args.seed)
            mol = rng.standard_normal((args.rows, 16))
            img = mol.copy() if args.kind == "retrieval-oracle" else rng.standard_normal((args.rows, 16))
            write_retrieval_csv(out, EmbeddingTable.paired(mol, img))
    print(f"wrote {args.kind} fixture to {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvclip", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=False):
        p.add_argument("--config", help="JSON file overriding the defaults")
        p.add_argument("--seed", type=int)
        if workers:
            p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("preprocess", help="reduce a 16-bit TIFF tree to sampled 8-bit PNGs")
    p.add_argument("input_root")
    p.add_argument("output_root")
    p.add_argument("--exclude-source", action="append", metavar="SOURCE")
    common(p, workers=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("loss-check", help="finite-difference check of a loss gradient")
    p.add_argument("--loss", choices=("clip", "emm", "imm"))
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--pairs", choices=("ordered_distinct", "unordered_distinct", "all_pairs"))
    p.add_argument("--include-positives", action="store_true", help="InfoNCE-style denominator")
    common(p)
    p.set_defaults(func=cmd_loss_check)

    p = sub.add_parser("train-toy", help="train the two-tower toy model on synthetic data")
    p.add_argument("--loss", choices=("clip", "emm", "imm"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("eval-retrieval", help="1:pool retrieval metrics from an embedding CSV")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--pool-size", type=int)
    p.add_argument("--ks", help="comma separated, e.g. 1,3,5,10")
    p.add_argument("--direction", choices=("img2mol", "mol2img", "both"))
    p.add_argument("--trials", type=int)
    p.add_argument("--label", default="model")
    p.add_argument("--out")
    p.add_argument("--assert-random-baseline", action="store_true",
                   help=f"exit {EXIT_NUMERIC} unless every metric is within {BASELINE_SIGMAS:g} SE of chance")
    common(p)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("eval-batch-effect", help="accuracy ratios on group-disjoint splits")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--probe", choices=("logreg", "knn"))
    p.add_argument("--repetitions", type=int)
    p.add_argument("--label", default="model")
    p.add_argument("--out")
    common(p, workers=True)
    p.set_defaults(func=cmd_eval_batch_effect)

    p = sub.add_parser("make-fixture", help="write synthetic inputs for the other subcommands")
    p.add_argument("kind", choices=FIXTURE_KINDS)
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256, help="image side for image fixtures")
    p.add_argument("--rows", type=int, default=2000, help="compounds for retrieval fixtures")
    p.set_defaults(func=cmd_make_fixture)
    return parser


def _setup_logging() -> None:
    level = getattr(logging, os.environ.get("HCS_LOG", "info").upper(), logging.INFO)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(level)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TrainingDivergedError, NonFiniteError, RatioUndefinedError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
