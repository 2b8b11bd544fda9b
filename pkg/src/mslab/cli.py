"""Command line front end: select bandwidths, cluster datasets, compare
partitions, run simulations, inspect the model registry, and emit
plot-ready artifacts.

Everything is file based: CSV in, CSV out, JSON metadata sidecars, and
gnuplot scripts for the plot subcommand.  Outputs are byte-identical
across runs with the same inputs regardless of --threads; wall-clock
numbers appear only behind --timings.

Exit codes: 0 success, 1 validation failure, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .errors import NumericalError, ValidationError
from .harness import (
    ExperimentConfig,
    run,
    summarize,
    write_counts_csv,
    write_metadata,
    write_raw_csv,
    write_summary_csv,
)
from .kernels import BandwidthMatrix
from .meanshift import MeanShiftConfig, cluster
from .models import load_points, load_registry
from .partition import (
    build_grid_from_kde,
    distance_in_measure,
    label_grid,
    load_partition,
    save_partition,
)
from .selectors import (
    SELECTOR_NAMES,
    MatrixClass,
    SelectorWorkspace,
    at_bandwidth,
    cv_criterion,
    it_residual,
    normal_scale_pilot,
    ns_bandwidth,
    parse_selector,
    pi_criterion,
    scv_criterion,
    select,
)


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with the validation code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"error: {message}\n")


# ---------------------------------------------------------------------------
# small shared helpers


def _note(args, message: str) -> None:
    if getattr(args, "verbose", False):
        print(message, file=sys.stderr)


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _json_text(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _parse_matrix(text: str, d: int) -> np.ndarray:
    """Parse a matrix flag: rows split by ';', entries by ','.

    A single number is shorthand for that multiple of the identity.
    """
    try:
        rows = [
            [float(v) for v in part.split(",")]
            for part in text.split(";")
            if part.strip()
        ]
    except ValueError:
        raise ValidationError(f"cannot parse matrix {text!r}") from None
    if not rows:
        raise ValidationError(f"cannot parse matrix {text!r}")
    if len(rows) == 1 and len(rows[0]) == 1:
        return rows[0][0] * np.eye(d)
    if len({len(r) for r in rows}) != 1 or (len(rows), len(rows[0])) != (d, d):
        raise ValidationError(
            f"matrix {text!r} must be {d}x{d} to match the data dimension"
        )
    return np.array(rows, dtype=float)


def _build_spec(selector: str, pilot_flag: str | None, d: int, max_evals=None):
    spec = parse_selector(selector)
    if pilot_flag is not None:
        if pilot_flag == "normal-scale":
            pass  # the default rule; harmless for ns/at/cv too
        elif pilot_flag.startswith("fixed:"):
            if not spec.needs_pilot:
                raise ValidationError(
                    f"selector {spec.name!r} does not use a pilot bandwidth"
                )
            spec = dataclasses.replace(
                spec, pilot=_parse_matrix(pilot_flag[len("fixed:"):], d)
            )
        else:
            raise ValidationError(
                f"unknown pilot {pilot_flag!r}; use normal-scale or fixed:<matrix>"
            )
    if max_evals is not None:
        spec = dataclasses.replace(spec, max_evals=max_evals)
    return spec


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("MSLAB_THREADS")
    if env is None:
        return 1
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"MSLAB_THREADS={env!r} is not an integer") from None


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# select


def _dry_run_doc(spec, data) -> dict:
    """Evaluate the selector's criterion at its starting bandwidth.

    Matches select(): the start is the normal-scale bandwidth, or its
    diagonal for the diagonal matrix class; ns and at are closed forms,
    so their start is already the answer and no criterion exists.
    """
    ws = SelectorWorkspace(data)
    if spec.method == "ns":
        H0, value, pilot = ns_bandwidth(ws.data).matrix, None, None
    elif spec.method == "at":
        H0, value, pilot = at_bandwidth(ws.data).matrix, None, None
    else:
        H0 = ns_bandwidth(ws.data).matrix
        if spec.matrix_class is MatrixClass.DIAGONAL:
            H0 = np.diag(np.diag(H0))
        pilot = None
        if spec.needs_pilot:
            if isinstance(spec.pilot, str):
                pilot = normal_scale_pilot(ws.data).matrix
            else:
                pilot = BandwidthMatrix(spec.pilot).matrix
        crit = {
            "cv": lambda: cv_criterion(H0, ws),
            "pi": lambda: pi_criterion(H0, ws, pilot),
            "scv": lambda: scv_criterion(H0, ws, pilot),
            "it": lambda: it_residual(H0, ws, pilot),
        }[spec.method]
        value = crit()
    return {
        "selector": spec.name,
        "H": H0.tolist(),
        "value": value,
        "evaluations": 0 if value is None else 1,
        "converged": True,
        "pilot": None if pilot is None else np.asarray(pilot).tolist(),
        "dry_run": True,
    }


def cmd_select(args) -> int:
    data = load_points(args.input)
    spec = _build_spec(args.selector, args.pilot, data.shape[1], args.max_evals)
    if args.dry_run:
        doc = _dry_run_doc(spec, data)
    else:
        res = select(spec, data)
        doc = res.to_dict()
        _note(args, f"{spec.name}: {res.evaluations} evaluations, "
                    f"converged={res.converged}")
    doc["input"] = args.input
    doc["n"] = int(data.shape[0])
    doc["dim"] = int(data.shape[1])
    doc["mslab_version"] = __version__
    _write_text(args.output, _json_text(doc))
    return 0


# ---------------------------------------------------------------------------
# cluster


def _labels_csv(data: np.ndarray, labels: np.ndarray) -> str:
    d = data.shape[1]
    lines = [",".join([f"x{k + 1}" for k in range(d)] + ["label"])]
    for row, label in zip(data, labels):
        lines.append(",".join([f"{v:.17g}" for v in row] + [str(int(label))]))
    return "\n".join(lines) + "\n"


def cmd_cluster(args) -> int:
    data = load_points(args.input)
    d = data.shape[1]
    if args.bandwidth is not None:
        H = BandwidthMatrix(_parse_matrix(args.bandwidth, d))
        selection = {"selector": "fixed", "H": H.matrix.tolist()}
    else:
        spec = _build_spec(args.selector or "ns", args.pilot, d)
        res = select(spec, data)
        H = res.H
        selection = res.to_dict()
        _note(args, f"{spec.name}: H selected in {res.evaluations} evaluations")
    config = MeanShiftConfig(step_tol=args.step_tol, max_iter=args.max_iter)
    result = cluster(data, data, H, config)
    _write_text(args.output, _labels_csv(data, result.labels))

    meta = {
        "input": args.input,
        "n": int(data.shape[0]),
        "dim": d,
        "n_clusters": result.n_modes,
        "modes": result.modes.tolist(),
        "non_converged": int(np.sum(~result.converged)),
        "ascent_violations": int(np.sum(~result.ascent_ok)),
        "selection": selection,
        "config": {"step_tol": config.step_tol, "merge_tol": config.merge_tol,
                   "max_iter": config.max_iter},
        "mslab_version": __version__,
    }
    if args.output is not None:
        with open(args.output + ".meta.json", "w") as fh:
            fh.write(_json_text(meta))
    _note(args, f"{result.n_modes} clusters on {data.shape[0]} points")

    if args.grid is not None:
        if args.partition_out is None:
            raise ValidationError("--grid needs --partition-out for the export")
        grid = build_grid_from_kde(data, H, args.grid)
        part = label_grid(grid, data, H, config)
        save_partition(part, args.partition_out)
        _note(args, f"partition: {part.n_clusters} clusters on "
                    f"{grid.n_points} grid points")
    elif args.partition_out is not None:
        raise ValidationError("--partition-out needs --grid <resolution>")
    return 0


# ---------------------------------------------------------------------------
# distance


def cmd_distance(args) -> int:
    a = load_partition(args.partition_a)
    b = load_partition(args.partition_b)
    report = distance_in_measure(a, b)
    _write_text(args.output, report.to_json(indent=2, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    if args.models is not None:
        models = [m for m in args.models.split(",") if m]
    else:
        models = list(load_registry(args.registry))
    if args.selectors is not None:
        selectors = [s for s in args.selectors.split(",") if s]
    else:
        selectors = list(SELECTOR_NAMES)
    config = ExperimentConfig(
        models=models,
        selectors=selectors,
        replications=args.replications,
        sample_size=args.sample_size,
        resolution=args.resolution,
        seed=args.seed,
        threads=_resolve_threads(args.threads),
        step_tol=args.step_tol,
        registry=args.registry,
        cache_dir=args.cache_dir,
    )
    os.makedirs(args.output_dir, exist_ok=True)
    _note(args, f"running {len(models)} models x {len(selectors)} selectors x "
                f"{config.replications} replications on {config.threads} threads")
    report = run(config)

    paths = {name: os.path.join(args.output_dir, name + suffix)
             for name, suffix in [("raw", ".csv"), ("summary", ".csv"),
                                  ("counts", ".csv"), ("metadata", ".json")]}
    write_raw_csv(report, paths["raw"], timings=args.timings)
    write_summary_csv(report, paths["summary"])
    write_counts_csv(report, paths["counts"])
    write_metadata(report, paths["metadata"], timings=args.timings)

    print("model,selector,reps,median,iqr,flagged,failed")
    for row in summarize(report):
        print(",".join([row["model"], row["selector"], str(row["reps"]),
                        _fmt(row["median"]), _fmt(row["iqr"]),
                        str(row["flagged"]), str(row["failed"])]))
    for key in ("raw", "summary", "counts", "metadata"):
        print(f"wrote: {paths[key]}")
    if args.timings:
        print(f"total seconds: {report.seconds_total:.3f}")
    return 0


# ---------------------------------------------------------------------------
# models


def _registry_doc(path: str | None) -> dict:
    if path is None:
        from importlib import resources

        text = resources.files("mslab").joinpath("data/models.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return json.loads(text)


def cmd_models(args) -> int:
    registry = load_registry(args.registry)  # validates before any dump
    doc = _registry_doc(args.registry)
    entries = {e["name"]: e for e in doc["models"]}
    if args.action == "list":
        for name, model in registry.items():
            print(f"{name}  type={entries[name].get('type', '?')}  "
                  f"dim={model.dim}  true_clusters={model.true_clusters}")
        return 0
    if args.name is None:
        raise ValidationError("models show needs a model name")
    if args.name not in entries:
        raise ValidationError(
            f"unknown model {args.name!r}; available: {', '.join(registry)}"
        )
    sys.stdout.write(_json_text(entries[args.name]))
    return 0


# ---------------------------------------------------------------------------
# plot


def _sniff_kind(path: str) -> str:
    with open(path, newline="") as fh:
        header = fh.readline().strip()
    if header.startswith("model,selector"):
        return "summary"
    if header.startswith("x1,") and header.endswith("label,mass"):
        return "partition"
    raise ValidationError(
        f"{path}: cannot infer plot kind from header {header!r}; pass --kind"
    )


def _plot_partition(args, prefix: str) -> None:
    part = load_partition(args.input)
    if part.grid.dim != 2:
        raise ValidationError("partition plots need a 2-d grid")
    points = part.grid.points()
    lines = ["# x1,x2,label,mass"]
    for row, label, mass in zip(points, part.labels, part.masses):
        lines.append(f"{row[0]:.17g},{row[1]:.17g},{int(label)},{mass:.17g}")
    data_path = prefix + ".csv"
    _write_text(data_path, "\n".join(lines) + "\n")

    k = max(part.n_clusters, 1)
    base = os.path.basename(prefix)
    script = "\n".join([
        f"# partition plot for {args.input}: {part.n_clusters} clusters",
        "set datafile separator \",\"",
        "set terminal pngcairo size 900,700",
        f"set output '{base}.png'",
        "set size ratio -1",
        "unset key",
        f"set palette maxcolors {k}",
        f"set cbrange [-0.5:{k - 0.5}]",
        "set cblabel 'cluster'",
        f"plot '{os.path.basename(data_path)}' using 1:2:3 "
        "with points pt 5 ps 0.4 palette",
    ]) + "\n"
    _write_text(prefix + ".gp", script)


def _plot_summary(args, prefix: str) -> None:
    import csv as _csv

    with open(args.input, newline="") as fh:
        rows = list(_csv.DictReader(fh))
    needed = {"model", "selector", "median", "iqr"}
    if rows and not needed.issubset(rows[0]):
        raise ValidationError(f"{args.input}: not a summary CSV")
    if not rows:
        raise ValidationError(f"{args.input}: empty report, nothing to plot")

    blocks: dict[str, list] = {}
    for row in rows:
        blocks.setdefault(row["model"], []).append(row)
    lines = ["# columns: index,selector,median,iqr"]
    for model, model_rows in blocks.items():
        lines.append(f"# model: {model}")
        for i, row in enumerate(model_rows):
            lines.append(f"{i},{row['selector']},{row['median']},{row['iqr']}")
        lines.append("")
        lines.append("")  # two blank records separate gnuplot indices
    data_path = prefix + ".csv"
    _write_text(data_path, "\n".join(lines[:-2]) + "\n")

    script = [
        f"# summary chart for {args.input}: median distance with IQR bars",
        "set datafile separator \",\"",
        f"set terminal pngcairo size 900,{300 * len(blocks)}",
        f"set output '{os.path.basename(prefix)}.png'",
        "set style fill solid 0.6",
        "set boxwidth 0.7",
        "set yrange [0:*]",
        "unset key",
        f"set multiplot layout {len(blocks)},1",
    ]
    for i, model in enumerate(blocks):
        script.append(f"set title '{model}'")
        script.append(
            f"plot '{os.path.basename(data_path)}' index {i} "
            "using 1:3:4:xtic(2) with boxerrorbars"
        )
    script.append("unset multiplot")
    _write_text(prefix + ".gp", "\n".join(script) + "\n")


def cmd_plot(args) -> int:
    kind = args.kind if args.kind != "auto" else _sniff_kind(args.input)
    prefix = args.output_prefix
    if prefix is None:
        prefix = os.path.splitext(args.input)[0] + "-plot"
    if kind == "partition":
        _plot_partition(args, prefix)
    else:
        _plot_summary(args, prefix)
    _note(args, f"wrote {prefix}.csv and {prefix}.gp")
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true",
                        help="progress notes on stderr")

    parser = _Parser(prog="mslab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select", parents=[common],
                       help="select a bandwidth matrix for a dataset")
    p.add_argument("input", help="data CSV, one point per row")
    p.add_argument("--selector", required=True, choices=list(SELECTOR_NAMES))
    p.add_argument("--pilot", default=None,
                   help="normal-scale (default) or fixed:<a,b;c,d>")
    p.add_argument("--max-evals", type=int, default=None,
                   help="override the optimizer budget per simplex run")
    p.add_argument("--dry-run", action="store_true",
                   help="evaluate the criterion at the starting bandwidth only")
    p.add_argument("--output", default=None, help="JSON file (default stdout)")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("cluster", parents=[common],
                       help="mean shift clustering of a dataset")
    p.add_argument("input", help="data CSV, one point per row")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--bandwidth", default=None,
                       help="fixed bandwidth matrix a,b;c,d (or scalar for s*I)")
    # default None, not "ns": argparse skips the exclusivity check when the
    # parsed value is identical to the default, so an explicit --selector ns
    # next to --bandwidth would slip through otherwise
    group.add_argument("--selector", default=None, choices=list(SELECTOR_NAMES),
                       help="bandwidth selector (default ns)")
    p.add_argument("--pilot", default=None,
                   help="normal-scale (default) or fixed:<a,b;c,d>")
    p.add_argument("--step-tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--grid", type=int, default=None, metavar="RESOLUTION",
                   help="also partition a grid of this resolution per axis")
    p.add_argument("--partition-out", default=None,
                   help="partition CSV path for the --grid export")
    p.add_argument("--output", default=None,
                   help="labels CSV file (default stdout)")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("distance", parents=[common],
                       help="distance in measure between two partitions")
    p.add_argument("partition_a", help="partition CSV written by cluster/save")
    p.add_argument("partition_b", help="partition CSV on the same grid")
    p.add_argument("--output", default=None, help="JSON file (default stdout)")
    p.set_defaults(func=cmd_distance)

    p = sub.add_parser("simulate", parents=[common],
                       help="run the selector comparison study")
    p.add_argument("--models", default=None,
                   help="comma list of registry models (default: all)")
    p.add_argument("--selectors", default=None,
                   help="comma list of selectors (default: all ten)")
    p.add_argument("--replications", type=int, default=20)
    p.add_argument("--sample-size", type=int, default=500)
    p.add_argument("--resolution", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: MSLAB_THREADS or 1)")
    p.add_argument("--step-tol", type=float, default=1e-4)
    p.add_argument("--registry", default=None, help="model registry JSON")
    p.add_argument("--cache-dir", default=None,
                   help="directory for ideal-partition reuse across runs")
    p.add_argument("--timings", action="store_true",
                   help="record wall times (makes outputs run-dependent)")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("models", parents=[common],
                       help="inspect the model registry")
    p.add_argument("action", choices=["list", "show"])
    p.add_argument("name", nargs="?", default=None)
    p.add_argument("--registry", default=None, help="model registry JSON")
    p.set_defaults(func=cmd_models)

    p = sub.add_parser("plot", parents=[common],
                       help="emit a gnuplot script + data CSV for a report")
    p.add_argument("input", help="partition CSV or summary CSV")
    p.add_argument("--kind", choices=["auto", "partition", "summary"],
                   default="auto")
    p.add_argument("--output-prefix", default=None,
                   help="write <prefix>.csv and <prefix>.gp")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
