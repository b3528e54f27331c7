"""Command-line entry point: ``healdag <subcommand>``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from healdag.dpo import (
    DpoConfig,
    PolicyParams,
    PreferenceDataset,
    dpo_gradient,
    finite_difference_gradient,
    synthetic_dataset,
    train,
)
from healdag.engine import (
    EXIT_CODES,
    EXIT_CONFIG_ERROR,
    RunResult,
    replay,
    run_files,
    strict_isolation_check,
)
from healdag.errors import ConfigError, HealdagError, ReplayMismatchError, ScenarioParseError
from healdag.metrics import aggregate, render_csv, render_table

log = logging.getLogger("healdag")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def cmd_run(args: argparse.Namespace) -> int:
    try:
        result = run_files(args.graph, args.scenario, args.config)
    except (ConfigError, ScenarioParseError) as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    out = Path(args.out)
    _write(out / "run.json", result.dumps())
    _write(out / "memory_trace.csv", memory_trace_csv(result))
    m = result.metrics
    print(
        f"{result.status.value}: tokens={m.tokens_total} tflops={m.tflops:.2f} "
        f"latency={m.latency_seconds:.2f}s eta={m.suspensions} isolation="
        f"{strict_isolation_check(result)}"
    )
    if result.answer is not None:
        print(f"answer: {result.answer}")
    return EXIT_CODES[result.status]


def memory_trace_csv(result: RunResult) -> str:
    lines = ["timestamp,loaded,footprint_bytes"]
    for row in result.memory_trace:
        lines.append(f"{row['timestamp']},{row['loaded']},{row['footprint_bytes']}")
    return "\n".join(lines) + "\n"


def cmd_replay(args: argparse.Namespace) -> int:
    recorded = RunResult.load(args.run)
    try:
        fresh = replay(recorded)
    except ReplayMismatchError as exc:
        print(f"REPLAY_MISMATCH at event {exc.index}", file=sys.stderr)
        print(f"  expected: {json.dumps(exc.expected, sort_keys=True)}", file=sys.stderr)
        print(f"  actual:   {json.dumps(exc.actual, sort_keys=True)}", file=sys.stderr)
        return 1
    print(f"replay identical: {fresh.status.value}, {len(fresh.events)} events")
    return 0


def _load_runs(path: Path) -> dict[str, RunResult]:
    if path.is_dir():
        files = sorted(path.rglob("*.json"))
        runs = {}
        for f in files:
            try:
                runs[str(f.relative_to(path).with_suffix(""))] = RunResult.load(f)
            except (ValueError, KeyError):
                continue
        return runs
    return {path.stem: RunResult.load(path)}


def cmd_report(args: argparse.Namespace) -> int:
    rows = aggregate(_load_runs(Path(args.run)))
    sys.stdout.write(render_csv(rows) if args.format == "csv" else render_table(rows))
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    runs = _load_runs(Path(args.runs))
    out = Path(args.out or args.runs)
    mem_rows = []
    tok_rows = []
    for name, result in sorted(runs.items()):
        for row in result.memory_trace:
            mem_rows.append([name, row["timestamp"], row["loaded"], row["footprint_bytes"]])
        m = result.metrics
        tok_rows.append([name, m.tokens_total - m.planner_tokens, m.planner_tokens, m.tokens_total])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "memory_trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "timestamp", "loaded", "footprint_bytes"])
        w.writerows(mem_rows)
    with open(out / "token_breakdown.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "expert_tokens", "planner_tokens", "tokens_total"])
        w.writerows(tok_rows)
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; wrote CSV artifacts only")
        return 0
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for name, result in sorted(runs.items()):
        ts = [r["timestamp"] for r in result.memory_trace]
        gb = [r["footprint_bytes"] / 1e9 for r in result.memory_trace]
        ax.step(ts, gb, where="post", label=name)
    ax.set_xlabel("simulated time (s)")
    ax.set_ylabel("footprint (GB)")
    if runs:
        ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out / "memory_trace.png", dpi=120)
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    names = [r[0] for r in tok_rows]
    ax.bar(names, [r[1] for r in tok_rows], label="experts")
    ax.bar(names, [r[2] for r in tok_rows], bottom=[r[1] for r in tok_rows], label="planner")
    ax.set_ylabel("tokens")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out / "token_breakdown.png", dpi=120)
    plt.close(fig)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    dataset = PreferenceDataset.load(args.pairs)
    doc = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    config = DpoConfig.from_dict(doc.get("dpo", doc))
    report = train(config, dataset)
    out = Path(args.out)
    _write(out / "training_report.json", json.dumps(report.to_dict(dataset.feature_names), indent=1) + "\n")
    print(f"loss {report.initial_loss:.6f} -> {report.final_loss:.6f} over {config.steps} steps")
    for name, w in zip(dataset.feature_names, report.params.weights):
        print(f"  {name:>16s} {w:+.6f}")
    return 0


def cmd_make_pairs(args: argparse.Namespace) -> int:
    doc = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    config = DpoConfig.from_dict(doc.get("dpo", doc))
    if args.synthetic:
        dataset = synthetic_dataset(
            args.queries, config.candidates_per_query, config.seed, config.epsilon
        )
    else:
        from healdag.candidates import make_dataset

        queries = [f"query {i}" for i in range(args.queries)]
        dataset = make_dataset(queries, config)
    dataset.save(args.out)
    print(f"{len(dataset.groups)} queries, {len(dataset.pairs)} preference pairs -> {args.out}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    dataset = synthetic_dataset(16, 4, seed=args.seed, noise_features=3)
    params = PolicyParams(rng.normal(size=dataset.dim), rng.normal(size=dataset.dim))
    beta = float(rng.uniform(0.05, 2.0))
    analytic = dpo_gradient(params, dataset, beta)
    numeric = finite_difference_gradient(params, dataset, beta)
    scale = np.maximum(np.abs(numeric), 1e-8)
    rel = float(np.max(np.abs(analytic - numeric) / scale))
    ok = rel <= 1e-4
    print(f"seed={args.seed} beta={beta:.4f} max relative error={rel:.3e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="healdag", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a task graph against a scenario")
    p.add_argument("--graph", required=True)
    p.add_argument("--scenario")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="re-execute a recorded run and compare")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="comparison table over run outputs")
    p.add_argument("--run", required=True, help="run file or directory of run files")
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="memory-trace and token-breakdown artifacts")
    p.add_argument("--runs", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("make-pairs", help="sample candidates and write a preference dataset")
    p.add_argument("--queries", type=int, default=16)
    p.add_argument("--config")
    p.add_argument("--synthetic", action="store_true", help="prefer-fewer-nodes toy data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_pairs)

    p = sub.add_parser("train-planner", help="DPO training on a preference dataset")
    p.add_argument("--pairs", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference DPO gradient")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except HealdagError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        # unreadable or malformed input files
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
