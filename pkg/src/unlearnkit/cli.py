"""Command-line entry point: ``unlearnkit {bench,stream,audit,gen-data}``.

Exit codes: 0 success, 1 error, 2 tolerance breach.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bench import run_benchmark, run_grid, simulate_stream
from .dare import audit_forest, load_forest, write_audit_csv
from .data import export_csv, make_blobs
from .errors import ConfigError, UnlearnError
from .sisa import load_sisa

EXACT_TOL = 1e-12


def parse_value(text: str):
    """TOML literal when it parses as one, otherwise the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(config: dict, pairs) -> dict:
    """Apply ``a.b.c=value`` overrides in place."""
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        node = config
        *parents, leaf = key.strip().split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part!r} is not a table")
        node[leaf] = parse_value(value.strip())
    return config


def load_config(path, overrides) -> dict:
    config = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            config = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    return apply_overrides(config, overrides)


def _cmd_bench(args) -> int:
    config = load_config(args.config, args.set)
    if config.get("grid"):
        merged, code = run_grid(config, args.out, args.deterministic, args.force, args.jobs)
        for (name, seed), (rep, c) in merged:
            print(f"{name} seed={seed} acc_err={rep['acc_err']:.6g} acc_dis={rep['acc_dis']:.6g} exit={c}")
        return code
    report, code = run_benchmark(config, args.out, args.deterministic, args.force)
    print(report.to_csv_row(), end="")
    return code


def _cmd_stream(args) -> int:
    config = load_config(args.config, args.set)
    rows = simulate_stream(config, args.out, args.deterministic, args.force)
    retrains = sum(r["decision"] == "retrain" for r in rows)
    print(f"{len(rows)} deletions, {retrains} retrains; log in {Path(args.out) / 'stream.csv'}")
    return 0


def _cmd_audit(args) -> int:
    """Audit a DaRE forest file, or check a SISA directory against its naive twin."""
    target = Path(args.path)
    if target.suffix == ".ukf":
        forest = load_forest(target)
        entries = audit_forest(forest)
        if args.csv:
            write_audit_csv(entries, args.csv)
        print(f"{len(entries)} mismatched node statistics")
        return 0 if not entries else 2
    if target.is_dir():
        other = Path(args.against) if args.against else target.parent / "model_naive"
        a, b = load_sisa(target), load_sisa(other)
        if a.checkpoints.shape != b.checkpoints.shape:
            print("checkpoint shapes differ")
            return 2
        gap = float(np.max(np.abs(a.checkpoints - b.checkpoints)))
        print(f"max |checkpoint difference| = {gap:.3g}")
        return 0 if gap <= EXACT_TOL else 2
    raise ConfigError(f"{target} is neither a .ukf forest nor a SISA checkpoint directory")


def _cmd_gen_data(args) -> int:
    data = make_blobs(args.n, args.p, args.sep, args.seed)
    export_csv(data, args.out)
    print(json.dumps({"path": str(args.out), "n": data.n, "p": data.p}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unlearnkit", description="Machine unlearning benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def runner(name, help_, fn):
        p = sub.add_parser(name, help=help_, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("config", nargs="?", help="TOML config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
        p.add_argument("--deterministic", action="store_true", help="null wall times and timestamps")
        p.set_defaults(func=fn)
        return p

    runner("bench", "run one benchmark cell or a grid", _cmd_bench).add_argument(
        "--jobs", type=int, default=1, help="parallel workers for grid cells")
    runner("stream", "simulate a monitored deletion stream", _cmd_stream)

    a = sub.add_parser("audit", help="check saved DaRE or SISA artifacts")
    a.add_argument("path", help="a .ukf forest file or a SISA checkpoint directory")
    a.add_argument("--against", help="SISA directory to compare with (default: sibling model_naive)")
    a.add_argument("--csv", help="write audit mismatches to this CSV")
    a.set_defaults(func=_cmd_audit)

    g = sub.add_parser("gen-data", help="write a Gaussian-blob CSV", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--p", type=int, default=10)
    g.add_argument("--sep", type=float, default=2.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UnlearnError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
