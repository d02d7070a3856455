"""Command line: ``run``, ``report`` and ``audit``.

Exit codes: 0 success, 1 at least one cell failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError, FormatError
from .experiment import aggregate, emit_report, format_table, load_results, parse_config, run_matrix
from .mask import audit_sparsity, load_mask


def _run(args) -> int:
    cfg = parse_config(args.config, profile=args.profile)
    out = Path(args.out or cfg.output_dir)
    outcome = run_matrix(cfg, out, workers=args.workers, resume=args.resume)
    if outcome.results:
        emit_report(outcome.results, out)
        print(format_table(aggregate(outcome.results)))
    print(f"{len(outcome.results)} cells ({outcome.reused} reused), {len(outcome.failures)} failed -> {out}")
    for f in outcome.failures:
        print(f"FAILED {f['strategy']} ratio={f['ratio']} seed={f['seed']}: {f['error']}", file=sys.stderr)
    return 0 if outcome.ok else 1


def _report(args) -> int:
    results = load_results(args.results_dir)
    if not results:
        print(f"no cells under {args.results_dir}/cells", file=sys.stderr)
        return 1
    emit_report(results, args.results_dir)
    print(format_table(aggregate(results)))
    return 0


def _audit(args) -> int:
    print(audit_sparsity(load_mask(args.mask_file)).format())
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="dualticket", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the strategy x sparsity x seed matrix")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--profile", choices=("paper", "desk"))
    p.add_argument("--resume", action="store_true", help="reuse finished cells in the output directory")
    p.set_defaults(func=_run)

    p = sub.add_parser("report", help="rebuild CSV/JSONL/SVG files from a results directory")
    p.add_argument("results_dir")
    p.set_defaults(func=_report)

    p = sub.add_parser("audit", help="print per-layer sparsity of a mask file")
    p.add_argument("mask_file")
    p.set_defaults(func=_audit)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
