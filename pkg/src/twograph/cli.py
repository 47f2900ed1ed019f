"""Command line entry point: ``twograph <command> CONFIG``.

Exit codes: 0 success, 1 a check failed, 2 bad config or usage.
"""

import argparse
import os
import sys

from .errors import ConfigError, TwoGraphError
from .graph import export_dot
from .runner import atomic_write, gradcheck, guarantee_suite, load_config, make_protocol, to_json, train, write_run

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # one line, no usage dump
        sys.stderr.write(f"twograph: error: {message}\n")
        raise SystemExit(EXIT_CONFIG)


def _out_dir(cfg, args):
    return args.out or cfg.get("output_dir") or os.path.join("runs", cfg["protocol"])


def cmd_validate(cfg, args):
    protocol = make_protocol(cfg)
    report = protocol.report
    for kind, msg in report.diagnostics:
        print(f"[{kind}] {msg}")
    n_q, n_r = len(protocol.query.nodes), len(protocol.response.nodes)
    print(f"{protocol.name}: {'valid' if report.ok else 'INVALID'} ({n_q} query nodes, {n_r} response nodes)")
    return EXIT_OK if report.ok else EXIT_FAILED


def cmd_run(cfg, args):
    protocol = make_protocol(cfg)
    protocol.require_valid()
    _, _, states, history = train(cfg, protocol, max_rounds=args.max_rounds)
    out = _out_dir(cfg, args)
    report = write_run(out, protocol, states, history, cfg)
    print(
        f"{protocol.name}: {report['rounds']} rounds, objective "
        f"{report['initial_objective']:.6g} -> {report['final_objective']:.6g}; wrote {out}"
    )
    return EXIT_OK


def cmd_gradcheck(cfg, args):
    rep = gradcheck(cfg)
    for name, err in rep.errors.items():
        print(f"{name}: max relative error {err:.3e} ({'pass' if rep.passed[name] else 'FAIL'})")
    out = args.out or os.path.join(_out_dir(cfg, args), "gradcheck.json")
    atomic_write(out, to_json(rep.to_dict()))
    print(f"wrote {out}")
    return EXIT_OK if rep.ok else EXIT_FAILED


def cmd_verify(cfg, args):
    report, ok = guarantee_suite(cfg)
    out = args.out or os.path.join(_out_dir(cfg, args), "verify.json")
    atomic_write(out, to_json(report))
    print(f"{cfg['protocol']}: guarantees {'hold' if ok else 'FAILED'}; wrote {out}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_export_dot(cfg, args):
    protocol = make_protocol(cfg)
    text = export_dot(protocol, args.which)
    out = args.out or os.path.join(_out_dir(cfg, args), f"{protocol.name}_{args.which}.dot")
    atomic_write(out, text)
    print(out)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "run": cmd_run,
    "gradcheck": cmd_gradcheck,
    "verify": cmd_verify,
    "export-dot": cmd_export_dot,
}


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="twograph", description="Build, check and run two-graph learning protocols.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    help_text = {
        "validate": "check the protocol's query and response graphs",
        "run": "train all players and write metrics.csv, final_params.json, report.json",
        "gradcheck": "compare responses with finite differences",
        "verify": "run the protocol's guarantee checks",
        "export-dot": "write a Graphviz rendering of one graph",
    }
    for name, text in help_text.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("config", help="JSON config file")
        sp.add_argument("--out", help="output directory (run) or file (other commands)")
        if name == "run":
            sp.add_argument("--max-rounds", type=int, help="override the stop rule's round limit")
        if name == "export-dot":
            sp.add_argument("--which", choices=("query", "response"), default="query")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        sys.stderr.write(f"twograph: config error: {exc}\n")
        return EXIT_CONFIG
    except TwoGraphError as exc:
        sys.stderr.write(f"twograph: {type(exc).__name__}: {exc}\n")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
