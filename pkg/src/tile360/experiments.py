"""Experiment suites: config validation, parameter sweeps, per-run records and aggregates.

A suite is described by one JSON document (see ``configs/default.json``).
Every run is identified by (planner, trace, seed index, parameter point);
its random streams depend only on (base seed, trace index, seed index), so
planners and grid points are compared on identical FoV walks, FoV
realizations and prediction errors.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .bandwidth import PredictionModel, TraceError, load_trace, save_trace, synthetic_trace
from .fov import random_walk_viewports, sample_trace, synthetic_distribution
from .model import VideoConfig, reference_config
from .online import OnlineSettings, run_online
from .planners import PLANNERS
from .qoe import QoeWeights, Utility
from .relaxed import SolverSettings

log = logging.getLogger(__name__)

SWEEPABLE = ("gamma", "beta", "p", "window", "warmup", "alpha", "lambda")
METRICS = ("expected_objective", "expected_qoe", "objective_per_chunk", "robust_objective",
           "stall_s", "mean_fov_bitrate_mbps", "mean_min_fov_bitrate_mbps", "guaranteed_rate_mbps")
DEFAULTS = {"gamma": 0.1, "beta": 0.8, "p": 0.2, "window": 2, "warmup": 1, "alpha": 0.95,
            "lambda": 1000.0}
BOOTSTRAP_RESAMPLES = 2000


@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" or "warning"
    message: str

    def __str__(self):
        return f"{self.level}: {self.message}"


def _fmt(x) -> str:
    """Shortest round-tripping text for numbers, so reruns are byte-identical."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def load_config(path) -> dict:
    path = Path(path)
    with path.open() as fh:
        doc = json.load(fh)
    doc.setdefault("_base_dir", str(path.resolve().parent))
    return doc


def video_from_dict(d: dict | None) -> VideoConfig:
    base = reference_config()
    d = dict(d or {})
    fields = {
        "num_chunks": base.num_chunks, "rows": base.rows, "cols": base.cols,
        "chunk_duration_s": base.chunk_duration_s, "rate_levels_mbps": base.rate_levels_mbps,
        "vrows": base.vrows, "vcols": base.vcols, "startup_delay_s": base.startup_delay_s,
        "max_buffer_chunks": base.max_buffer_chunks,
    }
    unknown = set(d) - set(fields)
    if unknown:
        raise ValueError(f"unknown video fields: {sorted(unknown)}")
    fields.update(d)
    fields["rate_levels_mbps"] = tuple(fields["rate_levels_mbps"])
    return VideoConfig(**fields)


def _defaults(doc: dict) -> dict:
    out = dict(DEFAULTS)
    out.update(doc.get("defaults", {}))
    return out


def _experiments(doc: dict) -> list:
    return list(doc.get("experiments", []))


def _trace_dir(doc: dict) -> Path:
    d = Path(doc["traces"]["dir"])
    if not d.is_absolute():
        d = Path(doc.get("_base_dir", ".")) / d
    return d


def validate_config(doc_or_path) -> list[Diagnostic]:
    """Check a suite config without running anything; returns itemized diagnostics."""
    diags: list[Diagnostic] = []

    def err(msg):
        diags.append(Diagnostic("error", msg))

    def warn(msg):
        diags.append(Diagnostic("warning", msg))

    if isinstance(doc_or_path, dict):
        doc = doc_or_path
    else:
        try:
            doc = load_config(doc_or_path)
        except OSError as exc:
            return [Diagnostic("error", f"cannot read config: {exc}")]
        except json.JSONDecodeError as exc:
            return [Diagnostic("error", f"config is not valid JSON: {exc}")]

    try:
        video = video_from_dict(doc.get("video"))
    except (TypeError, ValueError) as exc:
        err(f"video: {exc}")
        video = None

    planners = doc.get("planners")
    if not isinstance(planners, list) or not planners:
        err("planners: at least one planner is required")
        planners = []
    for name in planners:
        if name not in PLANNERS:
            err(f"planners: unknown planner {name!r} (choose from {', '.join(PLANNERS)})")

    try:
        Utility.from_dict(doc.get("utility", {"kind": "linear"}))
    except (TypeError, ValueError) as exc:
        err(f"utility: {exc}")

    try:
        SolverSettings(**doc.get("solver", {}))
    except (TypeError, ValueError) as exc:
        err(f"solver: {exc}")

    unknown = set(doc.get("defaults", {})) - set(DEFAULTS)
    if unknown:
        err(f"defaults: unknown parameters {sorted(unknown)}")
    d = _defaults(doc)
    _check_point(d, video, "defaults", err, warn)

    seeds = doc.get("seeds", 5)
    if not isinstance(seeds, int) or seeds < 1:
        err("seeds: must be a positive integer")

    _check_traces(doc, video, err)

    exps = _experiments(doc)
    if not exps:
        err("experiments: at least one experiment is required")
    names = set()
    for i, exp in enumerate(exps):
        where = f"experiments[{i}]"
        name = exp.get("name")
        if not name or not isinstance(name, str):
            err(f"{where}: missing name")
        elif name in names:
            err(f"{where}: duplicate name {name!r}")
        names.add(name)
        kind = exp.get("kind", "sweep")
        if kind not in ("sweep", "cdf"):
            err(f"{where}: kind must be 'sweep' or 'cdf'")
        sweep = exp.get("sweep")
        if sweep not in SWEEPABLE:
            err(f"{where}: sweep must be one of {', '.join(SWEEPABLE)}")
            continue
        values = exp.get("values")
        if not isinstance(values, list) or not values:
            err(f"{where}: values must be a non-empty list")
            continue
        bad = set(exp.get("fixed", {})) - set(DEFAULTS)
        if bad:
            err(f"{where}: unknown fixed parameters {sorted(bad)}")
        for m in exp.get("metrics", []):
            if m not in METRICS:
                err(f"{where}: unknown metric {m!r}")
        if kind == "sweep" and not exp.get("metrics"):
            err(f"{where}: sweep experiments need at least one metric")
        sub = exp.get("planners", planners)
        if not sub:
            err(f"{where}: planner list is empty")
        for name in sub:
            if name not in planners:
                err(f"{where}: planner {name!r} is not in the suite planner list")
        for v in values:
            point = dict(d)
            point.update(exp.get("fixed", {}))
            point[sweep] = v
            _check_point(point, video, f"{where} at {sweep}={v}", err, warn)
    return diags


def _check_point(point: dict, video, where, err, warn) -> None:
    beta, p, alpha = point["beta"], point["p"], point["alpha"]
    if not 0 < beta <= 1:
        err(f"{where}: beta must lie in (0, 1]")
    elif beta < 0.5:
        warn(f"{where}: beta={beta} is below 0.5; the designated viewport is then not the likely one")
    if not 0 <= p < 1:
        err(f"{where}: p must satisfy 0 <= p < 1")
    if not 0 < alpha <= 1:
        err(f"{where}: alpha must lie in (0, 1]")
    if point["gamma"] < 0 or point["lambda"] < 0:
        err(f"{where}: gamma and lambda must be nonnegative")
    if int(point["window"]) != point["window"] or point["window"] < 1:
        err(f"{where}: window must be a positive integer")
    if int(point["warmup"]) != point["warmup"] or point["warmup"] < 0:
        err(f"{where}: warmup must be a nonnegative integer")
    elif video is not None and point["warmup"] > video.num_chunks:
        err(f"{where}: warmup exceeds the number of chunks")


def _check_traces(doc: dict, video, err) -> None:
    traces_cfg = doc.get("traces")
    if not isinstance(traces_cfg, dict):
        err("traces: missing trace section")
        return
    if "synthetic" in traces_cfg:
        syn = traces_cfg["synthetic"]
        for key in ("count", "duration_s", "mean_mbps", "std_mbps"):
            if key not in syn:
                err(f"traces.synthetic: missing {key}")
        if syn.get("count", 1) < 1 or syn.get("mean_mbps", 1) <= 0 or syn.get("std_mbps", 1) <= 0:
            err("traces.synthetic: count, mean_mbps and std_mbps must be positive")
        return
    if "dir" not in traces_cfg:
        err("traces: give either 'dir' or 'synthetic'")
        return
    d = _trace_dir(doc)
    if not d.is_dir():
        err(f"traces: trace directory {d} does not exist")
        return
    files = sorted(d.glob("*.csv"))
    if not files:
        err(f"traces: no .csv traces in {d}")
    for f in files:
        try:
            load_trace(f, traces_cfg.get("scale_factor", 1.0), traces_cfg.get("min_duration_s"))
        except TraceError as exc:
            err(f"traces: {exc}")


def load_traces(doc: dict) -> list:
    traces_cfg = doc["traces"]
    if "synthetic" in traces_cfg:
        syn = traces_cfg["synthetic"]
        rng = np.random.default_rng(syn.get("seed", 0))
        return [synthetic_trace(int(syn["duration_s"]), syn["mean_mbps"], syn["std_mbps"], rng,
                                max_segment_s=syn.get("max_segment_s", 8),
                                floor_mbps=syn.get("floor_mbps", 0.5), name=f"synthetic{i:03d}")
                for i in range(syn["count"])]
    files = sorted(_trace_dir(doc).glob("*.csv"))
    return [load_trace(f, traces_cfg.get("scale_factor", 1.0), traces_cfg.get("min_duration_s")) for f in files]


@dataclass(frozen=True)
class RunTask:
    planner: str
    trace_index: int
    seed_index: int
    params: tuple  # sorted (name, value) pairs

    @property
    def run_id(self) -> str:
        digest = hashlib.sha1(json.dumps(self.params).encode()).hexdigest()[:10]
        return f"{self.planner}-t{self.trace_index:03d}-s{self.seed_index:02d}-{digest}"


def run_single(task: RunTask, trace, video: VideoConfig, utility: Utility, solver: SolverSettings,
               base_seed: int) -> dict:
    """Run one online simulation and return its JSON-ready record."""
    params = dict(task.params)
    # streams depend on (base seed, trace, seed index) only
    walk_ss, fov_ss, pred_ss = np.random.SeedSequence(
        [base_seed, task.trace_index, task.seed_index]).spawn(3)
    designated = random_walk_viewports(video.num_chunks, video, np.random.default_rng(walk_ss))
    dist = synthetic_distribution(designated, params["beta"], video)
    fov_trace = sample_trace(dist, np.random.default_rng(fov_ss))
    prediction = PredictionModel(params["p"], seed=int(pred_ss.generate_state(1)[0]))
    settings = OnlineSettings(int(params["window"]), int(params["warmup"]), task.planner,
                              solver=solver)
    weights = QoeWeights(params["gamma"], params["lambda"], params["alpha"])
    result = run_online(settings, dist, trace, prediction, video, utility, weights,
                        seed=task.seed_index, fov_trace=fov_trace)
    metrics = dict(result.metrics)
    metrics["objective_per_chunk"] = metrics["expected_objective"] / max(video.num_chunks, 1)
    return {
        "run_id": task.run_id,
        "planner": task.planner,
        "trace": trace.name,
        "trace_index": task.trace_index,
        "seed_index": task.seed_index,
        "params": params,
        "metrics": metrics,
        "decisions": result.decisions,
    }


def _worker(args):
    task, trace, video, utility, solver, base_seed, out_dir = args
    try:
        rec = run_single(task, trace, video, utility, solver, base_seed)
    except Exception as exc:  # reported per run, the suite carries on
        return {"run_id": task.run_id, "error": f"{type(exc).__name__}: {exc}"}
    if out_dir is not None:
        out = Path(out_dir)
        decisions = rec.pop("decisions")
        _atomic_write(out / "decisions" / f"{task.run_id}.jsonl",
                      "".join(json.dumps(d, sort_keys=True) + "\n" for d in decisions))
        _atomic_write(out / "runs" / f"{task.run_id}.json", json.dumps(rec, sort_keys=True, indent=1))
    else:
        rec.pop("decisions")
    return rec


def _points(doc: dict, exp: dict) -> list:
    base = _defaults(doc)
    base.update(exp.get("fixed", {}))
    out = []
    for v in exp["values"]:
        point = dict(base)
        point[exp["sweep"]] = v
        out.append(point)
    return out


def plan_tasks(doc: dict, num_traces: int) -> tuple[list, dict]:
    """All distinct runs, plus for each experiment the runs behind each (value, planner)."""
    seeds = doc.get("seeds", 5)
    tasks: dict = {}
    layout = {}
    for exp in _experiments(doc):
        rows = []
        for value, point in zip(exp["values"], _points(doc, exp)):
            params = tuple(sorted(point.items()))
            for planner in exp.get("planners", doc["planners"]):
                ids = []
                for t in range(num_traces):
                    for s in range(seeds):
                        task = RunTask(planner, t, s, params)
                        tasks.setdefault(task.run_id, task)
                        ids.append(task.run_id)
                rows.append((value, planner, ids))
        layout[exp["name"]] = rows
    return list(tasks.values()), layout


def bootstrap_ci(values, confidence: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean (degenerate samples give a point)."""
    x = np.asarray(values, dtype=float)
    if x.size < 2 or np.all(x == x[0]):
        m = float(x.mean()) if x.size else float("nan")
        return m, m
    res = stats.bootstrap((x,), np.mean, confidence_level=confidence, n_resamples=BOOTSTRAP_RESAMPLES,
                          method="percentile", random_state=np.random.default_rng(seed))
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def aggregate(doc: dict, layout: dict, records: dict) -> dict:
    """Build raw and aggregate tables per experiment from run records."""
    tables = {}
    for exp in _experiments(doc):
        name, sweep = exp["name"], exp["sweep"]
        raw, agg = [], []
        if exp.get("kind", "sweep") == "cdf":
            for value, planner, ids in layout[name]:
                bins = None
                counts = None
                for rid in ids:
                    rec = records[rid]
                    hist = rec["metrics"]["histogram"]
                    c = np.asarray(hist["count"], dtype=np.int64)
                    bins = hist["rate_mbps"]
                    counts = c if counts is None else counts + c
                    for r, n in zip(hist["rate_mbps"], hist["count"]):
                        raw.append([sweep, value, planner, rec["trace"], rec["seed_index"], r, n])
                total = int(counts.sum())
                cum = 0
                for r, n in zip(bins, counts.tolist()):
                    cum += n
                    agg.append([sweep, value, planner, r, n, n / total, cum / total])
            tables[name] = {
                "raw": (["param", "value", "planner", "trace", "seed", "rate_mbps", "count"], raw),
                "aggregate": (["param", "value", "planner", "rate_mbps", "count", "fraction", "cumulative"],
                              agg),
            }
            continue
        for value, planner, ids in layout[name]:
            for metric in exp["metrics"]:
                xs = []
                for rid in ids:
                    rec = records[rid]
                    x = rec["metrics"][metric]
                    xs.append(x)
                    raw.append([sweep, value, planner, rec["trace"], rec["seed_index"], metric, x])
                lo, hi = bootstrap_ci(xs)
                agg.append([sweep, value, planner, metric, len(xs), float(np.mean(xs)), lo, hi])
        tables[name] = {
            "raw": (["param", "value", "planner", "trace", "seed", "metric", "x"], raw),
            "aggregate": (["param", "value", "planner", "metric", "n", "mean", "ci_low", "ci_high"], agg),
        }
    return tables


def run_suite(doc_or_path, out_dir=None, seed: int | None = None, jobs: int = 1) -> dict:
    """Run every experiment of a suite config; returns the summary document.

    ``out_dir`` receives ``runs/*.json``, ``decisions/*.jsonl``,
    ``<experiment>_raw.csv``, ``<experiment>.csv`` and ``summary.json``.
    Raises ``ValueError`` when validation finds errors.
    """
    doc = doc_or_path if isinstance(doc_or_path, dict) else load_config(doc_or_path)
    errors = [d for d in validate_config(doc) if d.level == "error"]
    if errors:
        raise ValueError("invalid config:\n" + "\n".join(str(d) for d in errors))
    video = video_from_dict(doc.get("video"))
    utility = Utility.from_dict(doc.get("utility", {"kind": "linear"}))
    solver = SolverSettings(**doc.get("solver", {}))
    base_seed = doc.get("seed", 0) if seed is None else seed
    traces = load_traces(doc)
    tasks, layout = plan_tasks(doc, len(traces))
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "runs").mkdir(parents=True, exist_ok=True)
        (out / "decisions").mkdir(parents=True, exist_ok=True)
    args = [(t, traces[t.trace_index], video, utility, solver, base_seed, out) for t in tasks]
    log.info("running %d simulations with %d worker(s)", len(args), jobs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_worker, args, chunksize=1))
    else:
        results = [_worker(a) for a in args]
    records = {r["run_id"]: r for r in results}
    failures = [{"run_id": r["run_id"], "error": r["error"]} for r in results if "error" in r]
    summary = {"seed": base_seed, "runs": len(results), "failures": failures, "experiments": {}}
    if failures:
        return summary
    tables = aggregate(doc, layout, records)
    for name, t in tables.items():
        header, rows = t["aggregate"]
        summary["experiments"][name] = [dict(zip(header, row)) for row in rows]
        if out is not None:
            _atomic_write(out / f"{name}_raw.csv", _csv_text(*t["raw"]))
            _atomic_write(out / f"{name}.csv", _csv_text(header, rows))
    if out is not None:
        _atomic_write(out / "summary.json", json.dumps(summary, sort_keys=True, indent=1))
    return summary


def write_synthetic_traces(out_dir, count: int, duration_s: int, mean_mbps: float, std_mbps: float,
                           seed: int = 0, max_segment_s: int = 8) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        trace = synthetic_trace(duration_s, mean_mbps, std_mbps, rng, max_segment_s=max_segment_s)
        path = out / f"trace{i:03d}.csv"
        save_trace(trace, path)
        paths.append(path)
    return paths
