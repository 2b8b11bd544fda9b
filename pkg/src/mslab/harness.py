"""Simulation study driver.

Runs replications x selectors over the model registry, records the
distance in measure between each data-based whole-space clustering and
the ideal population clustering, and reduces the raw rows to the two
table layouts: median + IQR of the distances, and the distribution of
the induced cluster counts.

Raw rows are a pure function of the configuration: per-replication seeds
are derived by a stable hash of (master seed, model, replication), so
adding selectors or reordering models never changes the samples, and the
worker pool merges results in job order so parallelism never changes the
report.
"""

import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .errors import MslabError, ValidationError
from .meanshift import MeanShiftConfig
from .models import MixtureModel, RingSegmentModel, ideal_clustering, load_registry
from .partition import build_grid, distance_in_measure, label_grid, load_partition, save_partition
from .selectors import SelectorSpec, SelectorWorkspace, parse_selector, select

# parameters of the ideal-clustering run, recorded in the cache key so a
# stale cache entry can never satisfy a different computation
_IDEAL_PARAMS = {
    "beta": 0.05,
    "step_tol": 1e-6,
    "max_iter": 1000,
    "merge_factor": 1.5,
    "stall_tol": 1e-2,
    "stall_after": 150,
}


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """One simulation study: models x selectors x replications.

    Defaults are desk scale (R = 20, n = 500, 60x60 grid); the paper-scale
    study is the same config with replications=100 and resolution=200.
    """

    models: tuple
    selectors: tuple
    replications: int = 20
    sample_size: int = 500
    resolution: int = 60
    seed: int = 0
    threads: int = 1
    step_tol: float = 1e-4  # mean shift step tolerance for grid labeling
    registry: str | None = None  # model registry path, packaged when None
    cache_dir: str | None = None  # ideal-partition cache, off when None

    def __post_init__(self):
        models = tuple(str(m) for m in self.models)
        if not models:
            raise ValidationError("config needs at least one model")
        specs = []
        for s in self.selectors:
            specs.append(s if isinstance(s, SelectorSpec) else parse_selector(s))
        if not specs:
            raise ValidationError("config needs at least one selector")
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate selector names: {names}")
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "selectors", tuple(specs))
        if self.replications < 1:
            raise ValidationError("replications must be at least 1")
        if self.resolution < 2:
            raise ValidationError("grid resolution must be at least 2")
        if self.sample_size < 2:
            raise ValidationError("sample size must be at least 2")
        if self.threads < 1:
            raise ValidationError("threads must be at least 1")
        if self.step_tol <= 0:
            raise ValidationError("step_tol must be positive")

    @property
    def selector_names(self) -> tuple:
        return tuple(s.name for s in self.selectors)

    def to_dict(self) -> dict:
        return {
            "models": list(self.models),
            "selectors": [_spec_dict(s) for s in self.selectors],
            "replications": self.replications,
            "sample_size": self.sample_size,
            "resolution": self.resolution,
            "seed": self.seed,
            "threads": self.threads,
            "step_tol": self.step_tol,
            "registry": self.registry,
            "cache_dir": self.cache_dir,
        }


def _spec_dict(spec: SelectorSpec) -> dict:
    pilot = spec.pilot
    if not isinstance(pilot, str):
        pilot = np.asarray(
            pilot.matrix if hasattr(pilot, "matrix") else pilot, dtype=float
        ).tolist()
    return {
        "name": spec.name,
        "method": spec.method,
        "matrix_class": spec.matrix_class.value,
        "pilot": pilot,
        "x_tol": spec.x_tol,
        "f_tol": spec.f_tol,
        "max_evals": spec.max_evals,
        "it_rtol": spec.it_rtol,
    }


@dataclasses.dataclass(frozen=True)
class RunRow:
    """One (model, selector, replication) result."""

    model: str
    selector: str
    rep: int
    distance: float  # NaN on hard failure
    n_clusters: int  # 0 on hard failure
    flags: str  # semicolon-joined tokens, empty when clean
    seconds: float
    H: np.ndarray  # selected bandwidth, NaN entries on hard failure

    @property
    def failed(self) -> bool:
        return self.flags.startswith("error:")


@dataclasses.dataclass(frozen=True)
class ExperimentReport:
    """Raw rows plus per-model ideal-clustering facts."""

    config: ExperimentConfig
    rows: tuple
    ideal: dict  # model -> {n_clusters, n_flagged, grid, cache_key, cached}
    dim: int
    seconds_total: float


# ---------------------------------------------------------------------------
# the run itself


def _model_fingerprint(model) -> dict:
    if isinstance(model, MixtureModel):
        payload = {
            "type": "mixture",
            "components": [
                [c.weight, c.mean.tolist(), c.cov.tolist()] for c in model.components
            ],
        }
    elif isinstance(model, RingSegmentModel):
        payload = {
            "type": "ring",
            "segments": [
                [s.weight, s.center.tolist(), s.radius, s.theta_start, s.theta_end, s.sigma_r]
                for s in model.segments
            ],
            "blobs": [
                [b.weight, b.mean.tolist(), b.cov.tolist()] for b in model.blobs
            ],
        }
    else:
        raise ValidationError(f"cannot fingerprint model type {type(model).__name__}")
    payload["name"] = model.name
    payload["true_clusters"] = model.true_clusters
    return payload


def _cached_ideal(model, grid, cache_dir):
    """Ideal partition for (model, grid), from the disk cache when possible.

    The cache key hashes the model parameters, the exact grid, and the
    ideal-clustering settings, so any change recomputes.  Partitions
    round-trip losslessly (17 significant digits), which keeps cached and
    fresh runs identical.
    """
    key_doc = {
        "model": _model_fingerprint(model),
        "grid": {
            "lows": list(grid.lows),
            "highs": list(grid.highs),
            "shape": list(grid.shape),
        },
        "ideal": _IDEAL_PARAMS,
    }
    key = hashlib.sha256(
        json.dumps(key_doc, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()[:20]
    path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(cache_dir, f"ideal-{model.name}-{key}.csv")
        if os.path.exists(path):
            part = load_partition(path)
            info = {
                "n_clusters": part.n_clusters,
                "n_flagged": part.metadata.get("non_converged"),
                "cache_key": key,
                "cached": True,
            }
            return part, info
    ic = ideal_clustering(model, grid, **_IDEAL_PARAMS)
    if path is not None:
        save_partition(ic.partition, path)
    info = {
        "n_clusters": ic.partition.n_clusters,
        "n_flagged": ic.n_flagged,
        "cache_key": key,
        "cached": False,
    }
    return ic.partition, info


def _rep_seed(master: int, model_name: str, rep: int) -> int:
    digest = hashlib.sha256(f"{master}:{model_name}:{rep}".encode()).digest()
    return int.from_bytes(digest, "big")


def _run_replication(job):
    """All selectors on one replication of one model; returns its rows."""
    config, model, grid, ideal_part, rep = job
    d = model.dim
    data = model.sample(config.sample_size, _rep_seed(config.seed, model.name, rep))
    ws = SelectorWorkspace(data)
    ms_config = MeanShiftConfig(step_tol=config.step_tol)
    rows = []
    for spec in config.selectors:
        start = time.perf_counter()
        try:
            sel = select(spec, data, workspace=ws)
            part = label_grid(grid, data, sel.H, config=ms_config, model=model)
            report = distance_in_measure(part, ideal_part)
            flags = []
            if not sel.converged:
                flags.append("selector-not-converged")
            meta = part.metadata
            if meta.get("non_converged"):
                flags.append(f"grid-trajectories:{meta['non_converged']}")
            if meta.get("ascent_violations"):
                flags.append(f"ascent-violations:{meta['ascent_violations']}")
            row = RunRow(
                model=model.name,
                selector=spec.name,
                rep=rep,
                distance=float(report.distance),
                n_clusters=int(part.n_clusters),
                flags=";".join(flags),
                seconds=time.perf_counter() - start,
                H=sel.H.matrix.copy(),
            )
        except MslabError as exc:
            row = RunRow(
                model=model.name,
                selector=spec.name,
                rep=rep,
                distance=float("nan"),
                n_clusters=0,
                flags=f"error:{type(exc).__name__}",
                seconds=time.perf_counter() - start,
                H=np.full((d, d), np.nan),
            )
        rows.append(row)
    return rows


def run(config: ExperimentConfig) -> ExperimentReport:
    """Execute the study described by the config.

    Per model: build the grid, get the ideal clustering (cached on disk
    when a cache directory is set).  Per replication: draw the sample from
    its hash-derived seed, then run every selector, label the grid, and
    record the distance in measure against the ideal partition.  Failures
    become flagged rows; they never abort the run.  Rows come out in
    (model, replication, selector) order whatever the thread count.
    """
    t0 = time.perf_counter()
    registry = load_registry(config.registry)
    models = []
    for mid in config.models:
        if mid not in registry:
            raise ValidationError(
                f"unknown model {mid!r}; registry has {', '.join(sorted(registry))}"
            )
        models.append(registry[mid])
    dims = {m.dim for m in models}
    if len(dims) != 1:
        raise ValidationError(f"models mix dimensions {sorted(dims)}")
    d = dims.pop()
    if config.sample_size < d + 1:
        raise ValidationError(f"sample size must be at least d + 1 = {d + 1}")

    ideal_info: dict = {}
    jobs = []
    for model in models:
        grid = build_grid(model, config.resolution)
        part, info = _cached_ideal(model, grid, config.cache_dir)
        info["grid"] = {
            "lows": [float(v) for v in grid.lows],
            "highs": [float(v) for v in grid.highs],
        }
        info["true_clusters"] = model.true_clusters
        ideal_info[model.name] = info
        for rep in range(config.replications):
            jobs.append((config, model, grid, part, rep))

    if config.threads == 1:
        chunks = [_run_replication(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            chunks = list(pool.map(_run_replication, jobs))

    rows = tuple(row for chunk in chunks for row in chunk)
    return ExperimentReport(
        config=config,
        rows=rows,
        ideal=ideal_info,
        dim=d,
        seconds_total=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# summaries


def summarize(report: ExperimentReport) -> list:
    """Median + IQR of the distances per (model, selector) cell.

    Quartiles use linear interpolation between order statistics (numpy's
    default percentile method).  Hard-failure rows are excluded from the
    quartiles and counted in the 'failed' column; soft-flagged rows (for
    example a non-converged criterion search) stay in, since erratic
    selector behavior is part of the measured distribution.
    """
    out = []
    for model in report.config.models:
        for name in report.config.selector_names:
            sub = [r for r in report.rows if r.model == model and r.selector == name]
            if not sub:
                raise ValidationError(f"report has no rows for ({model}, {name})")
            good = [r.distance for r in sub if not r.failed]
            if good:
                q25, med, q75 = np.percentile(good, [25.0, 50.0, 75.0])
                median, iqr = float(med), float(q75 - q25)
            else:
                median, iqr = float("nan"), float("nan")
            out.append(
                {
                    "model": model,
                    "selector": name,
                    "reps": len(sub),
                    "median": median,
                    "iqr": iqr,
                    "flagged": sum(1 for r in sub if r.flags),
                    "failed": len(sub) - len(good),
                }
            )
    return out


def count_table(report: ExperimentReport):
    """Distribution of the induced cluster count per (model, selector).

    Returns (columns, rows): columns is the sorted list of observed
    integer counts (0 stands for hard failures), rows are dicts with a
    'counts' mapping whose values sum to the replication count.
    """
    columns = sorted({r.n_clusters for r in report.rows})
    rows = []
    for model in report.config.models:
        for name in report.config.selector_names:
            sub = [r for r in report.rows if r.model == model and r.selector == name]
            counts = {c: 0 for c in columns}
            for r in sub:
                counts[r.n_clusters] += 1
            rows.append({"model": model, "selector": name, "counts": counts})
    return columns, rows


# ---------------------------------------------------------------------------
# file output (CSV rows, JSON metadata)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_raw_csv(report: ExperimentReport, path: str, timings: bool = False) -> None:
    """Raw rows as CSV.

    The seconds column is written as 0.0 unless timings is set, so that
    the file is byte-identical across runs and thread counts; measured
    times live in the metadata (or in this column, on request).
    """
    d = report.dim
    header = ["model", "selector", "rep", "distance", "n_clusters", "flags", "seconds"]
    header += [f"h{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in report.rows:
            row = [
                r.model,
                r.selector,
                str(r.rep),
                _fmt(r.distance),
                str(r.n_clusters),
                r.flags,
                _fmt(r.seconds) if timings else "0.0",
            ]
            row += [_fmt(v) for v in np.asarray(r.H).ravel()]
            writer.writerow(row)


def read_raw_csv(path: str) -> list:
    """Rows written by write_raw_csv, as RunRow objects."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        fixed = ["model", "selector", "rep", "distance", "n_clusters", "flags", "seconds"]
        if header[: len(fixed)] != fixed:
            raise ValidationError(f"{path}: unexpected header {header[:7]}")
        d = int(round(len(header[len(fixed) :]) ** 0.5))
        if len(header) != len(fixed) + d * d:
            raise ValidationError(f"{path}: bandwidth columns are not a square block")
        rows = []
        for line in reader:
            if len(line) != len(header):
                raise ValidationError(f"{path}: ragged row {line[:3]}")
            h = np.array([float(v) for v in line[len(fixed) :]]).reshape(d, d)
            rows.append(
                RunRow(
                    model=line[0],
                    selector=line[1],
                    rep=int(line[2]),
                    distance=float(line[3]),
                    n_clusters=int(line[4]),
                    flags=line[5],
                    seconds=float(line[6]),
                    H=h,
                )
            )
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    return rows


def write_summary_csv(report: ExperimentReport, path: str) -> None:
    """Median + IQR per (model, selector) cell, one row per cell."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "selector", "reps", "median", "iqr", "flagged", "failed"])
        for cell in summarize(report):
            writer.writerow(
                [
                    cell["model"],
                    cell["selector"],
                    str(cell["reps"]),
                    _fmt(cell["median"]),
                    _fmt(cell["iqr"]),
                    str(cell["flagged"]),
                    str(cell["failed"]),
                ]
            )


def write_counts_csv(report: ExperimentReport, path: str) -> None:
    """Cluster-count distribution, one column per observed count."""
    columns, rows = count_table(report)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "selector"] + [f"n{c}" for c in columns])
        for row in rows:
            writer.writerow(
                [row["model"], row["selector"]] + [str(row["counts"][c]) for c in columns]
            )


def write_metadata(report: ExperimentReport, path: str, timings: bool = False) -> None:
    """Run metadata as JSON; wall times only on request, to keep the
    default output reproducible byte for byte.

    Thread count and cache directory never influence the rows, so the
    default document omits them; that keeps metadata byte-identical
    across runs that differ only in execution details.
    """
    config = report.config.to_dict()
    execution = {
        "threads": config.pop("threads"),
        "cache_dir": config.pop("cache_dir"),
    }
    # cache hits are an execution detail as well: a warm cache must not
    # change the metadata bytes
    ideal = {
        name: {k: v for k, v in info.items() if k != "cached"}
        for name, info in report.ideal.items()
    }
    doc = {
        "config": config,
        "dim": report.dim,
        "ideal": ideal,
        "quartile_method": "linear",
        "versions": {
            "mslab": __version__,
            "numpy": np.__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
    }
    if timings:
        per_cell: dict = {}
        for r in report.rows:
            per_cell.setdefault(f"{r.model}/{r.selector}", []).append(r.seconds)
        doc["execution"] = execution
        doc["timings"] = {
            "total_seconds": report.seconds_total,
            "mean_seconds_per_cell": {
                k: float(np.mean(v)) for k, v in sorted(per_cell.items())
            },
        }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
