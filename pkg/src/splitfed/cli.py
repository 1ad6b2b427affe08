"""``splitfed`` command line: simulate, cost, attack, dp-audit, report."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .attack import asr_sweep, curve_csv, noise_threshold
from .config import ConfigError, RunConfig, resolve
from .costmodel import reproduce_table
from .data import DataError
from .labeldp import AuditReport, NoiseConfig, dp_audit
from .protocol import run_training
from .scenario import ScenarioError
from .split import PlanError

EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _preamble(cfg: RunConfig, command: str) -> list[str]:
    return [f"splitfed {__version__} {command}", f"seed = {cfg.seed}", *cfg.lines()]


def _emit(text: str, out: Path | None, name: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text, encoding="utf-8")
    print(f"wrote {out / name}", file=sys.stderr)


def _overrides(args: argparse.Namespace) -> dict:
    over: dict = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "method", None) is not None:
        over["method"] = args.method
    if getattr(args, "epochs", None) is not None:
        over["epochs"] = args.epochs
    if getattr(args, "setup", None) is not None:
        over["cost"] = {"setup": args.setup}
    if getattr(args, "capture", None) is not None:
        over["attack"] = {"capture": args.capture}
    if getattr(args, "trials", None) is not None:
        over.setdefault("attack", {})["trials"] = args.trials
    audit = {}
    if getattr(args, "epsilon", None):
        audit["epsilons"] = [float(e) for e in args.epsilon]
    if getattr(args, "samples", None) is not None:
        audit["samples"] = args.samples
    if getattr(args, "weak_noise", False):
        audit["weak_noise"] = True
    if audit:
        over["audit"] = audit
    return over


def _config(args: argparse.Namespace) -> RunConfig:
    return resolve(args.config, _overrides(args))


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _config(args)
    shards, test = cfg.datasets()
    k = test.num_classes
    net = cfg.network(shards[0].input_shape[0] if len(shards[0].input_shape) == 1 else 0, k)
    report = run_training(cfg.scenario(), cfg["epochs"], net, cfg.sim_config(net, k), shards, test)
    pre = _preamble(cfg, "simulate")
    _emit(report.to_csv(pre), args.out, "epochs.csv")
    _emit(report.summary_csv(pre), args.out, "summary.csv")
    return 0


def cmd_cost(args: argparse.Namespace) -> int:
    cfg = _config(args)
    table = reproduce_table(cfg["cost.setup"], cfg["cost.epochs"])
    head = [f"splitfed {__version__} cost", f"cost.setup = {cfg['cost.setup']}", f"cost.epochs = {cfg['cost.epochs']}"]
    if args.format == "csv":
        text = "".join(f"# {h}\n" for h in head) + table.to_csv()
    else:
        text = "".join(f"<!-- {h} -->\n" for h in head) + "\n" + table.to_markdown()
    _emit(text, args.out, f"cost_setup{cfg['cost.setup']}.{args.format}")
    return 0


def cmd_attack(args: argparse.Namespace) -> int:
    cfg = _config(args)
    setup = cfg.attack_setup()
    curve = asr_sweep(setup, cfg["attack.grid"], cfg["attack.trials"], cfg["attack.replicas"])
    pre = _preamble(cfg, "attack")
    best = noise_threshold(curve, setup.k)
    pre.append(f"noise_threshold = {best.noise_scale!r}" if best else "noise_threshold = none")
    _emit(curve_csv(curve, pre), args.out, f"attack_{setup.capture}.csv")
    return 0


def cmd_dp_audit(args: argparse.Namespace) -> int:
    cfg = _config(args)
    reports: list[AuditReport] = []
    for eps in cfg["audit.epsilons"]:
        nc = NoiseConfig(eps, dims=cfg["audit.k"], seed=cfg.seed)
        scale = nc.sensitivity / (2.0 * eps) if cfg["audit.weak_noise"] else None
        reports.append(dp_audit(nc, cfg["audit.samples"], scale=scale))
    buf = io.StringIO()
    for line in _preamble(cfg, "dp-audit"):
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AuditReport.CSV_HEADER)
    for r in reports:
        w.writerow([repr(r.epsilon), r.bins, f"{r.max_ratio:.6f}", f"{r.bound:.6f}", r.verdict])
    _emit(buf.getvalue(), args.out, "dp_audit.csv")
    return 0


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    comments, rows = [], []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            comments.append(line[1:].strip())
        elif line.strip():
            rows.append(line)
    return comments, list(csv.reader(rows))


def cmd_report(args: argparse.Namespace) -> int:
    """Collect every CSV in a results directory into one document."""
    src = Path(args.results)
    if not src.is_dir():
        raise UsageError(f"results: no such directory {src}")
    files = sorted(src.glob("*.csv"))
    if not files:
        raise UsageError(f"results: no CSV files in {src}")
    out = io.StringIO()
    for path in files:
        comments, rows = _read_csv(path)
        seed = next((c for c in comments if c.startswith("seed = ")), "seed = n/a")
        if args.format == "csv":
            out.write(f"# file = {path.name}\n# {seed}\n")
            csv.writer(out, lineterminator="\n").writerows(rows)
            out.write("\n")
            continue
        out.write(f"## {path.name}\n\n{seed}\n\n")
        if rows:
            width = max(len(r) for r in rows)
            pad = [r + [""] * (width - len(r)) for r in rows]
            out.write("| " + " | ".join(pad[0]) + " |\n")
            out.write("|" + "|".join("---" for _ in range(width)) + "|\n")
            for r in pad[1:]:
                out.write("| " + " | ".join(r) + " |\n")
        out.write("\n")
    _emit(out.getvalue(), args.out, f"report.{args.format}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitfed", description="Split/federated training simulator and cost model.")
    parser.add_argument("--version", action="version", version=f"splitfed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, fmt: bool = False) -> None:
        p.add_argument("--config", help="TOML file or preset name")
        p.add_argument("--seed", type=int, help="root seed")
        p.add_argument("--out", type=Path, help="directory for output files (default: stdout)")
        if fmt:
            p.add_argument("--format", choices=("csv", "md"), default="md")

    p = sub.add_parser("simulate", help="train and account one method")
    common(p)
    p.add_argument("--method", help="override the training method")
    p.add_argument("--epochs", type=int, help="override the number of global epochs")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cost", help="reference cost table")
    common(p, fmt=True)
    p.add_argument("--setup", type=int, choices=(1, 2))
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("attack", help="label inference success against noise scales")
    common(p)
    p.add_argument("--capture", choices=("sfl", "eusfl_leak"))
    p.add_argument("--trials", type=int)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("dp-audit", help="empirical ratio test of the label noise")
    common(p)
    p.add_argument("--epsilon", action="append", help="privacy budget (repeatable)")
    p.add_argument("--samples", type=int)
    p.add_argument("--weak-noise", action="store_true", help="audit a mechanism using half the required noise scale")
    p.set_defaults(func=cmd_dp_audit)

    p = sub.add_parser("report", help="collect result CSVs into one document")
    p.add_argument("results", help="directory written by other commands")
    p.add_argument("--out", type=Path)
    p.add_argument("--format", choices=("csv", "md"), default="md")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, ScenarioError, PlanError, DataError, FileNotFoundError) as exc:
        print(f"splitfed: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
