"""``stquant`` command line: train, replay, report.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .harness import OPTIMIZERS, make_logistic, make_mlp, make_quadratic, run_experiment
from .optim import AdamConfig, MemoryReport
from .policy import DEFAULT_PHI, DEFAULT_UPDATE_FREQ, PolicyConfig, default_tau
from .quant import DEFAULT_BLOCK_SIZE
from .stats import DEFAULT_ALPHA
from .trace import TraceFormatError, read_jsonl, replay, write_csv_schedule, write_jsonl

log = logging.getLogger("stquant")

EXIT_USAGE = 1
EXIT_DATA = 2


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stquant", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tr = sub.add_parser("train", help="run one optimizer arm on a synthetic problem")
    tr.add_argument("--problem", choices=("quadratic", "logistic", "mlp"), default="quadratic")
    tr.add_argument("--optimizer", choices=OPTIMIZERS, default="stquant")
    tr.add_argument("--steps", type=int, default=500)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--layers", type=int, default=3, help="MLP depth")
    tr.add_argument("--dim", type=int, default=100, help="quadratic/logistic dimension, MLP width")
    tr.add_argument("--lr", type=float, default=1e-2)
    tr.add_argument("--weight-decay", type=float, default=0.0)
    tr.add_argument("--tau", type=float, default=None, help="annealing constant (default: depth/batch rule)")
    tr.add_argument("--phi", type=float, default=DEFAULT_PHI)
    tr.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    tr.add_argument("--u", type=int, default=DEFAULT_UPDATE_FREQ, help="policy update frequency")
    tr.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE)
    tr.add_argument("--workers", type=int, default=1, help="simulated workers K")
    tr.add_argument("--save-trace", action="store_true", help="also write trace.jsonl")
    tr.add_argument("--out", type=Path, required=True)

    rp = sub.add_parser("replay", help="recompute bit policies from a statistics trace")
    rp.add_argument("--trace", type=Path, required=True)
    rp.add_argument("--tau", type=float, default=500.0)
    rp.add_argument("--phi", type=float, default=DEFAULT_PHI)
    rp.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    rp.add_argument("--u", type=int, default=DEFAULT_UPDATE_FREQ)
    rp.add_argument("--out", type=Path, required=True)

    rep = sub.add_parser("report", help="print the memory table of a train run")
    rep.add_argument("--run", type=Path, required=True)
    return parser


def _make_problem(args):
    if args.problem == "quadratic":
        return make_quadratic(args.dim, 100.0, args.seed)
    if args.problem == "logistic":
        return make_logistic(512, args.dim, args.seed)
    return make_mlp(args.layers, args.dim, args.seed)


def _positive(args, *names):
    for name in names:
        if getattr(args, name) is not None and getattr(args, name) <= 0:
            raise argparse.ArgumentTypeError(f"--{name.replace('_', '-')} must be positive")


def cmd_train(args) -> int:
    _positive(args, "steps", "layers", "dim", "lr", "tau", "u", "block_size", "workers")
    problem = _make_problem(args)
    tau = args.tau if args.tau is not None else default_tau(problem.depth, problem.batch_size)
    policy = PolicyConfig(phi=args.phi, tau=tau, alpha=args.alpha, update_freq=args.u)
    config = AdamConfig(
        lr=args.lr, weight_decay=args.weight_decay, block_size=args.block_size, workers=args.workers, policy=policy
    )
    run = run_experiment(problem, args.optimizer, args.steps, args.seed, config)
    log.info("trained %s/%s for %d steps in %.2fs", args.problem, args.optimizer, args.steps, run.wall_time)

    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "loss"))
        for t, loss in enumerate(run.losses, start=1):
            w.writerow((t, repr(loss)))
    if args.optimizer != "oracle32":
        write_csv_schedule(run.policy_history, out / "schedule.csv", run.layer_names)
    if args.save_trace:
        write_jsonl(run.trace, out / "trace.jsonl")
    _write_json(out / "memory.json", run.memory.to_dict())
    snapshot = {
        "command": "train",
        "problem": args.problem,
        "optimizer": args.optimizer,
        "steps": args.steps,
        "seed": args.seed,
        "layers": args.layers,
        "dim": args.dim,
        "n_params": problem.n_params,
        "final_loss": run.final_loss,
        "adam": {k: v for k, v in asdict(config).items() if k != "policy"},
        "policy": asdict(policy),
    }
    _write_json(out / "config.json", snapshot)
    return 0


def cmd_replay(args) -> int:
    _positive(args, "tau", "u")
    try:
        records = read_jsonl(args.trace)
    except FileNotFoundError:
        raise DataError(f"trace not found: {args.trace}") from None
    except TraceFormatError as exc:
        raise DataError(f"{args.trace}: {exc}") from None
    if not records:
        raise DataError(f"{args.trace}: trace is empty")
    policy = PolicyConfig(phi=args.phi, tau=args.tau, alpha=args.alpha, update_freq=args.u)
    result = replay(records, policy)
    names = {e.id: e.name for rec in records for e in rec.layers}
    args.out.mkdir(parents=True, exist_ok=True)
    width = max(names) + 1 if names else 0
    write_csv_schedule(result.history, args.out / "schedule.csv", [names.get(i, f"layer{i}") for i in range(width)])
    _write_json(args.out / "summary.json", result.summary())
    return 0


def cmd_report(args) -> int:
    path = args.run / "memory.json"
    if not path.is_file():
        raise DataError(f"no memory.json in {args.run}")
    try:
        report = MemoryReport.from_dict(json.loads(path.read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed memory report ({exc})") from None
    print(format_report(report))
    return 0


def format_report(report: MemoryReport) -> str:
    head = f"{'layer':<16}{'params':>10}{'bits':>6}{'ideal B':>12}{'codes B':>12}{'scales B':>10}{'header B':>10}{'overhead':>10}"
    lines = [head, "-" * len(head)]
    for l in report.layers:
        ratio = l.scale_bytes / l.code_bytes if l.code_bytes else 0.0
        lines.append(
            f"{l.name:<16}{l.n_params:>10}{l.bits:>6}{l.ideal_bytes:>12.0f}{l.code_bytes:>12}"
            f"{l.scale_bytes:>10}{l.header_bytes:>10}{ratio:>9.2%}"
        )
    lines.append("-" * len(head))
    lines.append(f"average bits            {report.average_bits:.3f}")
    lines.append(f"ideal bytes (codes)     {report.ideal_bytes:.0f}")
    lines.append(f"packed bytes (total)    {report.total_bytes}")
    lines.append(f"scale overhead bytes    {report.scale_bytes}")
    lines.append(f"saved vs 32-bit         {report.saved_vs_32bit_pct:.1f}% (ideal), {report.actual_saved_vs_32bit_pct:.1f}% (packed)")
    lines.append(f"saved vs 8-bit          {report.saved_vs_8bit_pct:.1f}% (ideal)")
    return "\n".join(lines)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"train": cmd_train, "replay": cmd_replay, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"stquant: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"stquant: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
