"""Command line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 partial run (flagged seeds).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, config, experiments
from .datasets import DataError
from .io import read_checkpoint, write_dataset
from .runner import RunExists, output_root, read_result, run

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_PARTIAL = 0, 2, 3, 4

COMMANDS = {
    "train": "train",
    "volume": "volume",
    "poison-scan": "poison_scan",
    "data-scan": "data_scan",
    "grok": "grok",
    "oracle": "oracle",
    "fit": "fit",
    "slice": "slice",
    "imbalance": "imbalance",
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="basinvol", description="Measure basin volumes of trained networks.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="BLOCK.FIELD=VALUE",
                        help="override a config field (repeatable)")

    g = sub.add_parser("gen-data", help="materialize the configured dataset pool as a cache file")
    common(g)
    g.add_argument("-o", "--out", help="output file (default: <output root>/data-<id>.txt)")

    for name in COMMANDS:
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--force", action="store_true", help="overwrite an existing run with the same hash")
        if name == "volume":
            sp.add_argument("--checkpoint", help="measure this checkpoint instead of training")
        if name == "fit":
            sp.add_argument("--result", help="data-scan result.json (or its run directory)")
    return p


def _load(args, kind: str | None) -> config.ExperimentConfig:
    overrides = list(args.set)
    if kind is not None:
        overrides.insert(0, f"kind={kind}")
    return config.load(args.config, overrides)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            cfg = _load(args, None)
            ds = experiments.load_pool(cfg)
            out = Path(args.out) if args.out else output_root(cfg) / f"data-{ds.id[:12]}.txt"
            out.parent.mkdir(parents=True, exist_ok=True)
            write_dataset(out, ds)
            print(out)
            return EXIT_OK

        cfg = _load(args, COMMANDS[args.command])
        kwargs = {}
        if args.command == "volume" and args.checkpoint:
            kwargs["checkpoint"] = read_checkpoint(args.checkpoint)
        if args.command == "fit":
            src = args.result or cfg.fit.result
            if src:
                kwargs["result_doc"] = read_result(src)
        target, doc = run(cfg, force=args.force, **kwargs)
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunExists as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(target)
    if doc["flagged"]:
        print(f"{doc['flagged']} seed(s) flagged", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
