"""Command-line entry point orchestrating the pipeline stage by stage.

Stages hand off through files in the output directory, so every step can be
rerun, compared, or audited on its own. Exit codes: 0 success, 1 usage,
2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .data import DataError, SbmSpec, sbm_generate
from .federation import TrainingError
from .labelprop import PropagationError
from .policy import PolicyError
from .ppr import PprError

log = logging.getLogger("fedaml")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _setup_logging() -> None:
    level = os.environ.get("FEDAML_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedaml", description=__doc__)
    parser.add_argument("--config", type=Path, help="run config JSON")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset or SBM sample")
    gen.add_argument("--pattern", choices=["fan-out", "loop", "gather-scatter", "hybrid"])
    gen.add_argument("--size", type=int, default=6, help="pattern group size")
    gen.add_argument("--countries", default="US,DE,FR")
    gen.add_argument("--edges", type=int, default=5000, help="background edge count")
    gen.add_argument("--accounts", type=int, default=300, help="accounts per country")
    gen.add_argument("--sbm", nargs="+", metavar="KEY=VALUE",
                     help="emit an SBM sample instead (n= s= pin= pout=)")
    gen.add_argument("--dataset", action="store_true",
                     help="full fixture: background traffic plus one of each pattern")

    train = sub.add_parser("train", help="federated training -> checkpoint + metrics")
    train.add_argument("--data", type=Path, required=True)

    detect = sub.add_parser("detect", help="score every edge with a checkpoint")
    detect.add_argument("--data", type=Path, required=True)
    detect.add_argument("--checkpoint", type=Path, required=True)

    pprc = sub.add_parser("ppr", help="cluster suspicious accounts from scores")
    pprc.add_argument("--data", type=Path, required=True)
    pprc.add_argument("--scores", type=Path, required=True)
    pprc.add_argument("--plain", action="store_true",
                      help="disable the cross-institution variant")

    prop = sub.add_parser("propagate", help="refine scores through cluster structure")
    prop.add_argument("--data", type=Path, required=True)
    prop.add_argument("--scores", type=Path, required=True)
    prop.add_argument("--clusters", type=Path, required=True)

    dec = sub.add_parser("decide", help="learn thresholds and emit decisions")
    dec.add_argument("--data", type=Path, required=True)
    dec.add_argument("--scores", type=Path, required=True)
    dec.add_argument("--fixed-threshold", type=float,
                     help="skip learning; apply one uniform threshold")
    dec.add_argument("--budget", type=float,
                     help="freeze only the top fraction of edges by score")

    rep = sub.add_parser("report", help="merged tables and figures")
    rep.add_argument("--data", type=Path, required=True)
    rep.add_argument("--scores", type=Path)
    rep.add_argument("--train-metrics", type=Path)
    rep.add_argument("--economic", type=Path)

    return parser


def _parse_sbm(pairs: list[str], seed: int) -> SbmSpec:
    keys = {"n": 200, "s": 40, "pin": 0.5, "pout": 0.05}
    for pair in pairs:
        if "=" not in pair:
            raise DataError(f"--sbm expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        if key not in keys:
            raise DataError(f"--sbm: unknown key {key!r}")
        keys[key] = float(value)
    return SbmSpec(n=int(keys["n"]), s=int(keys["s"]), p_in=keys["pin"],
                   p_out=keys["pout"], seed=seed)


def _cmd_generate(args, config: pl.RunConfig) -> dict:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.sbm:
        spec = _parse_sbm(args.sbm, config.seed)
        adjacency, planted = sbm_generate(spec)
        edges_path = out_dir / "sbm_edges.csv"
        with open(edges_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["u", "v"])
            rows, cols = np.nonzero(np.triu(adjacency))
            for u, v in zip(rows, cols):
                writer.writerow([int(u), int(v)])
        planted_path = out_dir / "sbm_planted.txt"
        planted_path.write_text("\n".join(str(i) for i in planted) + "\n",
                                encoding="utf-8")
        return {"sbm_edges": str(edges_path), "planted": str(planted_path),
                "spec": {"n": spec.n, "s": spec.s, "p_in": spec.p_in,
                         "p_out": spec.p_out, "seed": spec.seed}}

    countries = tuple(c for c in args.countries.split(",") if c)
    if args.pattern and not args.dataset:
        spec = pl.DatasetSpec(countries=countries, background_edges=0,
                              patterns=((args.pattern, args.size),),
                              seed=config.seed)
    else:
        spec = pl.DatasetSpec(countries=countries, background_edges=args.edges,
                              accounts_per_country=args.accounts, seed=config.seed)
    return pl.stage_generate(out_dir, spec)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        overrides = {"seed": args.seed} if args.seed is not None else None
        config = pl.load_config(args.config, overrides)
    except (DataError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA

    try:
        if args.command == "generate":
            result = _cmd_generate(args, config)
        elif args.command == "train":
            result = pl.stage_train(args.data, args.out, config)
        elif args.command == "detect":
            result = pl.stage_detect(args.data, args.checkpoint, args.out, config)
        elif args.command == "ppr":
            if args.plain:
                config.ppr.cross_bank = False
            result = pl.stage_ppr(args.data, args.scores, args.out, config)
        elif args.command == "propagate":
            result = pl.stage_propagate(args.data, args.scores, args.clusters,
                                        args.out, config)
        elif args.command == "decide":
            result = pl.stage_decide(args.data, args.scores, args.out, config,
                                     fixed_threshold=args.fixed_threshold,
                                     budget_fraction=args.budget)
        elif args.command == "report":
            result = pl.stage_report(args.data, args.out, config,
                                     scores_path=args.scores,
                                     train_metrics_path=args.train_metrics,
                                     economic_path=args.economic)
        else:  # pragma: no cover - argparse enforces the choices
            return EXIT_USAGE
    except (DataError, pl.ArtifactError, PolicyError, FileNotFoundError) as exc:
        log.debug("data error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, PprError, PropagationError, FloatingPointError) as exc:
        log.debug("numerical error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
