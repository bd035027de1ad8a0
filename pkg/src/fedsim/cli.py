"""``fedsim`` command line: partition, simulate, gradcheck, report.

Exit codes: 0 success, 1 validation error (bad config, bad input files,
failed gradient check, missing metric), 2 runtime error (a round in which
every sampled client aborted).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from fedsim.config import ExperimentConfig, load_config
from fedsim.datagen import partition_to_csv
from fedsim.errors import ConfigError, FedsimError, RoundError
from fedsim.experiment import Simulation, build_setup
from fedsim.fedcore import save_checkpoint, strategy_digest
from fedsim.gradsuite import TOLERANCE, run_checks
from fedsim.runlog import (
    IMP_RATIO_DEFINITION,
    atomic_write,
    convergence_round,
    format_manifest,
    format_value,
    read_csv,
    series,
    write_csv,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def resolve_threads(flag: int | None, env: dict | None = None) -> int:
    """``--threads`` wins, then ``FEDSIM_THREADS``, then 1."""
    if flag is not None:
        value, source = flag, "--threads"
    else:
        raw = (os.environ if env is None else env).get("FEDSIM_THREADS", "1")
        try:
            value, source = int(raw), "FEDSIM_THREADS"
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}", "FEDSIM_THREADS") from None
    if value < 1:
        raise ConfigError(f"must be >= 1, got {value}", source)
    return value


def _config(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}", "--set")
        overrides[key.strip()] = value.strip()
    return load_config(args.config, overrides)


def _out_dir(args, config: ExperimentConfig) -> Path:
    out = Path(args.out or config.values["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _rows_to_csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def cmd_partition(args) -> int:
    config = _config(args)
    setup = build_setup(config)
    out = _out_dir(args, config)
    partition = setup.partition
    atomic_write(out / "partition.csv", partition_to_csv(partition))
    hist_rows = []
    for client in setup.clients:
        data = client.data
        if data.task.kind != "cls":
            continue
        idx = partition.assignments[client.client_id] if setup.labels is not None else np.arange(len(data.dataset))
        labels = np.asarray(data.dataset.targets)[idx].astype(np.int64)
        counts = np.bincount(labels, minlength=data.task.num_classes)
        hist_rows += [(client.client_id, c, int(n)) for c, n in enumerate(counts)]
    atomic_write(out / "label_histogram.csv", _rows_to_csv(("client", "label", "count"), hist_rows))
    sizes = partition.sizes()
    print(f"{partition.num_clients} clients, {sum(sizes)} samples, sizes {min(sizes)}..{max(sizes)}")
    print(f"wrote {out / 'partition.csv'} and {out / 'label_histogram.csv'}")
    return EXIT_OK


def _round_rows(sim: Simulation):
    for report in sim.reports:
        for k, c in report.clients.items():
            yield (
                report.round, k, c.num_samples, format_value(c.train_loss), format_value(c.reg_loss),
                format_value(c.kd_loss), c.bytes_uploaded, c.bytes_downloaded, c.upload_checksum, int(c.aborted),
            )


ROUNDS_HEADER = (
    "round", "client", "num_samples", "train_loss", "reg_loss", "kd_loss",
    "bytes_uploaded", "bytes_downloaded", "upload_sha256", "aborted",
)


def _write_artifacts(sim: Simulation, out: Path, status: str) -> None:
    config = sim.config
    write_csv(sim.records, out / "metrics.csv")
    atomic_write(out / "rounds.csv", _rows_to_csv(ROUNDS_HEADER, _round_rows(sim)))
    atomic_write(out / "config.txt", config.canonical_text())
    manifest = {
        "status": status,
        "config_digest": config.digest,
        "seed": config.seed,
        "strategy": strategy_digest(config.strategy),
        "rounds_completed": sim.state.round,
        "rounds_requested": config.train.rounds,
        "dimension": sim.state.weights.size,
        "bytes_uploaded": sum(r.bytes_uploaded for r in sim.reports),
        "bytes_downloaded": sum(r.bytes_downloaded for r in sim.reports),
        "imp_ratio": IMP_RATIO_DEFINITION,
        "weights_sha256": sim.state.weights.checksum(),
    }
    atomic_write(out / "manifest.txt", format_manifest(manifest))


def cmd_simulate(args) -> int:
    config = _config(args)
    threads = resolve_threads(args.threads)
    out = _out_dir(args, config)
    checkpoint_dir = out / "checkpoint"
    stamp = {"config_digest": config.digest, "strategy": strategy_digest(config.strategy), "seed": config.seed}

    def on_round(sim: Simulation, report) -> None:
        if sim.state.round % config.train.eval_every == 0 or sim.state.round == config.train.rounds:
            save_checkpoint(checkpoint_dir, sim.state, stamp)

    sim = Simulation(config, threads, on_round)
    try:
        sim.run()
    except RoundError as exc:
        save_checkpoint(checkpoint_dir, sim.state, stamp)
        _write_artifacts(sim, out, "aborted")
        print(f"error: {exc}; checkpointed round {sim.state.round} to {checkpoint_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    _write_artifacts(sim, out, "complete")
    print(f"{config.train.rounds} rounds, {len(sim.records)} metric rows -> {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_checks(seed=args.seed or 0)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max_rel_err={r.error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {', '.join(failed)}", file=sys.stderr)
        return EXIT_INVALID
    print(f"all {len(results)} components within {TOLERANCE:g}")
    return EXIT_OK


def summarize(path, metric: str, client="global", split: str = "test") -> tuple[float, float, int]:
    """(final, best, convergence round) of one metric series in a metrics CSV."""
    points = series(read_csv(path), metric, client, split)
    if not points:
        raise ConfigError(f"{path} has no {split} rows for client {client}", f"metric {metric}")
    values = [v for _, v in points]
    best = min(values) if metric in ("avg_loss", "mse") else max(values)
    return points[-1][1], best, convergence_round(points)


COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def line_chart_svg(runs: Sequence[tuple[str, list[tuple[int, float]]]], metric: str, width: int = 640, height: int = 400) -> str:
    """A small standalone SVG line chart of ``metric`` against round."""
    pad = 50
    xs = [r for _, pts in runs for r, _ in pts]
    ys = [v for _, pts in runs for _, v in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 15}" text-anchor="middle">round</text>',
        f'<text x="15" y="{height / 2}" transform="rotate(-90 15 {height / 2})" text-anchor="middle">{metric}</text>',
        f'<text x="{pad}" y="{height - pad + 15}" text-anchor="middle">{x0}</text>',
        f'<text x="{width - pad}" y="{height - pad + 15}" text-anchor="middle">{x1}</text>',
        f'<text x="{pad - 5}" y="{height - pad}" text-anchor="end">{y0:.3g}</text>',
        f'<text x="{pad - 5}" y="{pad}" text-anchor="end">{y1:.3g}</text>',
    ]
    for i, (label, pts) in enumerate(runs):
        color = COLORS[i % len(COLORS)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        parts.append(f'<text x="{width - pad + 5}" y="{pad + 15 * i}" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(args) -> int:
    rows = []
    charts = []
    for path in args.csv:
        records = read_csv(path)
        metric = args.metric or next((m for m in ("acc", "imp_ratio", "mse") if any(r.metric == m for r in records)), None)
        if metric is None:
            raise ConfigError(f"{path} has no acc, imp_ratio or mse rows", "--metric")
        final, best, conv = summarize(path, metric, args.client, args.split)
        rows.append((str(path), metric, final, best, conv))
        charts.append((Path(path).parent.name or str(path), series(records, metric, args.client, args.split)))
    width = max(len(r[0]) for r in rows)
    print(f"{'run':<{width}}  {'metric':<9}  {'final':>10}  {'best':>10}  {'conv_round':>10}")
    for path, metric, final, best, conv in rows:
        print(f"{path:<{width}}  {metric:<9}  {final:>10.6f}  {best:>10.6f}  {conv:>10d}")
    if args.chart:
        atomic_write(args.chart, line_chart_svg(charts, rows[0][1]))
        print(f"wrote {args.chart}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors: exit 1, keeping 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedsim", description="Deterministic federated-learning simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def experiment_args(p):
        p.add_argument("--config", type=Path, help="dotted key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", type=Path, help="output directory (default: output.dir)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("partition", help="write the client partition and label histograms")
    experiment_args(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("simulate", help="run the federation and write metrics, checkpoints, manifest")
    experiment_args(p)
    p.add_argument("--threads", type=int, help="client worker threads (fallback: FEDSIM_THREADS)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable component")
    p.add_argument("--seed", type=int, help="seed for the random probe points")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="final/best/convergence table for metrics CSVs")
    p.add_argument("csv", nargs="+", type=Path)
    p.add_argument("--metric", choices=("acc", "avg_loss", "mse", "imp_ratio"))
    p.add_argument("--client", default="global", help="client id or 'global'")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--chart", type=Path, help="write an SVG line chart here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "client", "global") != "global":
        try:
            args.client = int(args.client)
        except ValueError:
            print("error: --client: expected an integer or 'global'", file=sys.stderr)
            return EXIT_INVALID
    try:
        return args.func(args)
    except RoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FedsimError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
