"""Command line entry point: ``surrogate-hmc sample`` and ``surrogate-hmc experiment``."""

import argparse
import json
import logging
import sys

from .harness import (
    EXPERIMENTS, ConfigError, DataMissing, RunConfig, run_sample, summarize,
)

EXIT_CONFIG = 2
EXIT_DATA = 3


def _parser():
    ap = argparse.ArgumentParser(prog="surrogate-hmc", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("sample", help="run one sampler from a JSON config")
    sp.add_argument("--config", required=True, help="path to a RunConfig JSON file")
    sp.add_argument("--seed", type=int, help="override the master seed")
    sp.add_argument("--out", default="run", help="output directory (default: run)")
    sp.add_argument("--timing", action="store_true",
                    help="record per-row wall-clock times (breaks byte-identical reruns)")

    ep = sub.add_parser("experiment", help="reproduce one experiment protocol")
    ep.add_argument("name", choices=sorted(EXPERIMENTS))
    ep.add_argument("--scale", type=float, default=None,
                    help="fraction of the dataset to use; desk-scale defaults if omitted")
    ep.add_argument("--seed", type=int, default=0)
    ep.add_argument("--out", default=None, help="output directory (default: exp-<name>)")
    ep.add_argument("--data", help="data file (a9a LibSVM file or MEG matrix)")
    ep.add_argument("--synthetic", action="store_true",
                    help="generate a stand-in dataset when no data file is available")
    ep.add_argument("--budget", type=float, help="wall-clock seconds per run (logistic, ica)")
    ep.add_argument("--seeds", type=int, help="number of seeds (betabin, probit, ica)")
    ep.add_argument("--workers", type=int, default=1,
                    help="parallel jobs for the betabin sweep (default 1)")
    return ap


def _experiment_kwargs(args):
    kw = {"seed": args.seed}
    name = args.name
    if name in ("logistic", "ica"):
        kw.update(data=args.data, synthetic=args.synthetic, scale=args.scale)
        if args.budget is not None:
            kw["budget"] = args.budget
    elif args.scale is not None:
        kw["scale"] = args.scale
    if args.seeds is not None:
        if name == "logistic":
            raise ConfigError("--seeds", "the logistic study runs a single seed")
        kw["n_seeds"] = args.seeds
    if name == "betabin":
        kw["workers"] = args.workers
    return kw


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "sample":
            cfg = RunConfig.load(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
                cfg.validate()
            trace, _, manifest = run_sample(cfg, args.out, timing=args.timing)
            print("wrote %d rows to %s/trace.csv (acceptance %.3f)"
                  % (len(trace), args.out, trace.acceptance_rate))
        else:
            out = args.out or "exp-%s" % args.name
            rows = EXPERIMENTS[args.name](out=out, **_experiment_kwargs(args))
            metrics = sorted({r["metric"] for r in rows})
            print("wrote %d metric rows to %s/metrics.csv" % (len(rows), out))
            for m in metrics:
                print("  median %s: %s" % (m, json.dumps(summarize(rows, m, key="method"))))
    except ConfigError as exc:
        print("invalid config: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except DataMissing as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print("config file not found: %s" % exc.filename, file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
