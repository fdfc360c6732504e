"""Command-line entry point: ``iaxkad {run,verify,scaling,codec-golden}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import ConfigError
from .identity import KademliaParams
from .sim import Scenario, measure_scaling, metrics_json, run_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_IO = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_overrides(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--peers", type=int)
    p.add_argument("--alpha", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--bits", type=int)
    p.add_argument("--loss", type=float)
    p.add_argument("--out", metavar="PATH")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iaxkad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a scenario and emit metrics JSON")
    run.add_argument("--scenario", metavar="PATH")
    run.add_argument("--lookups", type=int, default=None, help="random lookups after joins")
    run.add_argument("--calls", type=int, default=None, help="random calls after joins")
    run.add_argument("--trace", metavar="PATH", help="write the frame trace as JSON Lines")
    _add_overrides(run)

    verify = sub.add_parser("verify", help="run the invariant suite")
    verify.add_argument("--seed", type=int, default=7)

    scaling = sub.add_parser("scaling", help="mean lookup rounds per network size")
    scaling.add_argument("--sizes", default="256,1024")
    scaling.add_argument("--lookups", type=int, default=500)
    _add_overrides(scaling)

    golden = sub.add_parser("codec-golden", help="write or check golden frame vectors")
    golden.add_argument("--check", metavar="PATH", help="compare against a stored fixture file")
    golden.add_argument("--out", metavar="PATH")
    return parser


def _params(args, base: KademliaParams) -> KademliaParams:
    fields = base.as_dict()
    for name in ("alpha", "k", "bits"):
        value = getattr(args, name, None)
        if value is not None:
            fields[name] = value
    return KademliaParams(**fields)


def _emit(text: str, out: str | None):
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _load_scenario(args) -> Scenario:
    if args.scenario:
        with open(args.scenario) as fh:
            s = Scenario.from_dict(json.load(fh))
    else:
        s = Scenario()
    s.params = _params(args, s.params)
    if args.seed is not None:
        s.seed = args.seed
    if args.peers is not None:
        s.n_peers = args.peers
    if args.loss is not None:
        s.loss = args.loss
    if args.lookups is not None:
        s.random_lookups = args.lookups
    if args.calls is not None:
        s.random_calls = args.calls
    s.validate()
    return s


def cmd_run(args) -> int:
    s = _load_scenario(args)
    trace = [] if args.trace else None
    metrics = run_scenario(s, trace=trace)
    if trace is not None:
        with open(args.trace, "w") as fh:
            for record in trace:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    metrics["cli"] = {k: v for k, v in sorted(vars(args).items())
                      if k not in ("command", "trace", "out") and v is not None}
    _emit(metrics_json(metrics), args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    failed = 0
    for name, ok, detail in run_all(args.seed):
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed += not ok
    return EXIT_INVARIANT if failed else EXIT_OK


def cmd_scaling(args) -> int:
    try:
        sizes = [int(x) for x in args.sizes.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --sizes: {args.sizes!r}") from exc
    params = _params(args, KademliaParams())
    rows = measure_scaling(sizes, seed=args.seed or 0, lookups=args.lookups, params=params)
    lines = ["n\tmean_rounds\tmean_messages\toracle_exact_rate"]
    for r in rows:
        lines.append(f"{r['n']}\t{r['mean_rounds']:.3f}\t{r['mean_messages']:.3f}\t{r['oracle_exact_rate']:.3f}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_codec_golden(args) -> int:
    from .golden import golden_vectors

    vectors = golden_vectors()
    if args.check:
        with open(args.check) as fh:
            stored = json.load(fh)
        bad = [name for name, hexdata in vectors.items() if stored.get(name) != hexdata]
        for name in bad:
            print(f"MISMATCH {name}: stored={stored.get(name)} computed={vectors[name]}")
        if bad:
            return EXIT_INVARIANT
        print(f"{len(vectors)} golden vectors match")
        return EXIT_OK
    _emit(json.dumps(vectors, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "scaling": cmd_scaling,
            "codec-golden": cmd_codec_golden}


def main(argv=None) -> int:
    level = os.environ.get("IAXKAD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"config error: malformed scenario JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
